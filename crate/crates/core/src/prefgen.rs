// SPDX-License-Identifier: Apache-2.0

//! Self-constructed preference pairs: the loser is the base model's answer on
//! the plain view, the winner fuses its answers on K augmented views.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, DecodeInput, Expert, GuidedDecoder};
use crate::error::{Error, Result};
use crate::metrics::{extract_mentions, parse_answer};
use crate::model::SamplePolicy;
use crate::scenegen::{augment, render_view, AugmentKind, DatasetRecord, Observation, Query, Scene, SceneConfig};
use crate::seed::derive_seed;
use crate::tokenization::{TokenId, Tokenizer, EOS};

pub const FUSION_PROMPT: &str = "Please provide a comprehensive fusion based on the following candidate answers.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub k: usize,
    pub augments: Vec<String>,
    pub seeds: Vec<u64>,
}

/// One line of the preference file. Texts are stored instead of ids so each
/// model can tokenize them with its own tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub scene_id: u64,
    pub query: Query,
    pub y_w_text: String,
    pub y_l_text: String,
    pub meta: PairMeta,
}

impl PreferencePair {
    /// `(y_w, y_l)` under `tok`, each terminated by EOS.
    pub fn tokens(&self, tok: &Tokenizer) -> (Vec<TokenId>, Vec<TokenId>) {
        (with_eos(tok.encode(&self.y_w_text)), with_eos(tok.encode(&self.y_l_text)))
    }
}

fn with_eos(mut ids: Vec<TokenId>) -> Vec<TokenId> {
    ids.push(EOS);
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    WinA,
    WinB,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub outcome: Outcome,
    pub score_a: f64,
    pub score_b: f64,
}

pub const JUDGE_TIE_TOL: f64 = 1e-9;
pub const JUDGE_PENALTY: f64 = 2.0;

/// Objects a response commits to. A "yes" to a presence query mentions the
/// queried object.
pub fn response_mentions(text: &str, query: &Query, inventory: &SceneConfig) -> BTreeSet<String> {
    match query {
        Query::Caption { .. } => extract_mentions(text, inventory),
        Query::Presence { object, .. } => match parse_answer(text) {
            Some(true) => BTreeSet::from([object.clone()]),
            _ => BTreeSet::new(),
        },
    }
}

/// `#true mentions - penalty * #hallucinated mentions`.
pub fn judge_score(text: &str, query: &Query, scene: &Scene, inventory: &SceneConfig, penalty: f64) -> f64 {
    let m = response_mentions(text, query, inventory);
    let bad = m.iter().filter(|n| !scene.contains(n)).count() as f64;
    (m.len() as f64 - bad) - penalty * bad
}

/// Oracle judge. `Tie` iff the scores differ by less than [`JUDGE_TIE_TOL`].
pub fn judge(y_a: &str, y_b: &str, query: &Query, scene: &Scene, inventory: &SceneConfig, penalty: f64) -> JudgeVerdict {
    let score_a = judge_score(y_a, query, scene, inventory, penalty);
    let score_b = judge_score(y_b, query, scene, inventory, penalty);
    let outcome = if (score_a - score_b).abs() < JUDGE_TIE_TOL {
        Outcome::Tie
    } else if score_a > score_b {
        Outcome::WinA
    } else {
        Outcome::WinB
    };
    JudgeVerdict {
        outcome,
        score_a,
        score_b,
    }
}

/// Greedy (or sampled) response on one observation, always EOS-terminated.
pub fn respond_on(
    target: Expert,
    query: &Query,
    obs: &Observation,
    policy: SamplePolicy,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let tok = target.tokenizer;
    let mut y = target
        .params
        .sample_response(&tok.encode(query.text()), &obs.tokens(tok), policy, max_len)?;
    if y.last() != Some(&EOS) {
        y.truncate(max_len.saturating_sub(1));
        y.push(EOS);
    }
    Ok(y)
}

/// Loser: the base model's greedy answer on the plain view.
pub fn gen_loser(target: Expert, query: &Query, scene: &Scene, inventory: &SceneConfig, max_len: usize) -> Result<Vec<TokenId>> {
    respond_on(target, query, &render_view(scene, &inventory.render), SamplePolicy::Greedy, max_len)
}

/// One answer per augmented view, in `kinds` order.
#[allow(clippy::too_many_arguments)]
pub fn gen_candidates(
    target: Expert,
    query: &Query,
    scene: &Scene,
    inventory: &SceneConfig,
    kinds: &[AugmentKind],
    seeds: &[u64],
    policy: CandidatePolicy,
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    if kinds.is_empty() {
        return Err(Error::InvalidK("need at least one augmented view".into()));
    }
    if kinds.len() != seeds.len() {
        return Err(Error::InvalidInput(format!("{} augments but {} seeds", kinds.len(), seeds.len())));
    }
    kinds
        .iter()
        .zip(seeds)
        .map(|(kind, &seed)| {
            let obs = augment(scene, kind, seed, &inventory.render)?;
            let policy = match policy {
                CandidatePolicy::Greedy => SamplePolicy::Greedy,
                CandidatePolicy::Temperature { tau } => SamplePolicy::Temperature { tau, seed },
            };
            respond_on(target, query, &obs, policy, max_len)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidatePolicy {
    Greedy,
    Temperature { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Union of extracted mentions, rendered canonically.
    OracleUnion,
    /// Candidates plus the fusion prompt fed back through the target model.
    Model,
}

pub enum FusionMode<'a> {
    OracleUnion,
    Model {
        expert: Expert<'a>,
        observation: String,
        max_len: usize,
    },
}

/// Winner text from candidate texts.
pub fn fuse(candidates: &[String], query: &Query, inventory: &SceneConfig, mode: &FusionMode) -> Result<String> {
    if candidates.iter().all(|c| c.trim().is_empty()) {
        return Err(Error::EmptyFusion);
    }
    match mode {
        FusionMode::OracleUnion => Ok(match query {
            Query::Caption { .. } => {
                let union: BTreeSet<String> = candidates.iter().flat_map(|c| extract_mentions(c, inventory)).collect();
                inventory.canonical_caption(union.iter().map(String::as_str))
            }
            Query::Presence { .. } => {
                let yes = candidates.iter().any(|c| parse_answer(c) == Some(true));
                if yes { "yes" } else { "no" }.to_string()
            }
        }),
        FusionMode::Model {
            expert,
            observation,
            max_len,
        } => {
            let prompt = format!("{} {} {}", FUSION_PROMPT, query.text(), candidates.join(" ; "));
            let cfg = DecodeConfig {
                combinator: crate::decode::Combinator::Base,
                max_len: *max_len,
                ..DecodeConfig::default()
            };
            let dec = GuidedDecoder::new(*expert, None, cfg)?;
            Ok(dec.decode(&DecodeInput::new(&prompt, observation))?.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefConfig {
    pub k: usize,
    pub augments: Vec<AugmentKind>,
    pub fusion: FusionKind,
    pub policy: CandidatePolicy,
    pub max_len: usize,
    /// Set from the run seeds; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PrefConfig {
    fn default() -> Self {
        PrefConfig {
            k: 4,
            augments: default_augments(),
            fusion: FusionKind::OracleUnion,
            policy: CandidatePolicy::Greedy,
            max_len: 40,
            seed: 11,
        }
    }
}

/// View list for K up to 6; the first K entries are used.
pub fn default_augments() -> Vec<AugmentKind> {
    vec![
        AugmentKind::crop(),
        AugmentKind::contrast(),
        AugmentKind::gamma(),
        AugmentKind::crop(),
        AugmentKind::crop(),
        AugmentKind::crop(),
    ]
}

impl PrefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidK("K must be at least 1".into()));
        }
        if self.augments.len() < self.k {
            return Err(Error::InvalidK(format!(
                "K = {} but only {} augmentations configured",
                self.k,
                self.augments.len()
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be at least 1".into()));
        }
        self.augments.iter().try_for_each(AugmentKind::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefManifest {
    pub records: usize,
    pub kept: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    pub k: usize,
    pub augments: Vec<String>,
    pub fusion: FusionKind,
    pub seed: u64,
    /// Judge preference of the winner over the loser on kept pairs.
    pub winner_rate: f64,
    pub tie_rate: f64,
}

fn view_seed(base: u64, record: u64, view: usize) -> u64 {
    derive_seed(base, 1000 + view as u64, record)
}

/// One pair per record; pairs whose winner equals the loser are dropped and counted.
pub fn build_preference_dataset(
    records: &[DatasetRecord],
    target: Expert,
    inventory: &SceneConfig,
    cfg: &PrefConfig,
) -> Result<(Vec<PreferencePair>, PrefManifest)> {
    cfg.validate()?;
    let kinds = &cfg.augments[..cfg.k];
    let labels: Vec<String> = kinds.iter().map(|k| k.label().to_string()).collect();
    let tok = target.tokenizer;
    let built: Vec<Option<(PreferencePair, crate::prefgen::JudgeVerdict)>> = records
        .par_iter()
        .map(|rec| {
            let loser = gen_loser(target, &rec.query, &rec.scene, inventory, cfg.max_len)?;
            let seeds: Vec<u64> = (0..cfg.k).map(|v| view_seed(cfg.seed, rec.id, v)).collect();
            let cands = gen_candidates(target, &rec.query, &rec.scene, inventory, kinds, &seeds, cfg.policy, cfg.max_len)?;
            let cand_text: Vec<String> = cands.iter().map(|c| tok.decode(c)).collect::<Result<_>>()?;
            let mode = match cfg.fusion {
                FusionKind::OracleUnion => FusionMode::OracleUnion,
                FusionKind::Model => FusionMode::Model {
                    expert: target,
                    observation: render_view(&rec.scene, &inventory.render).text(),
                    max_len: cfg.max_len,
                },
            };
            let y_w_text = match fuse(&cand_text, &rec.query, inventory, &mode) {
                Ok(t) => t,
                Err(Error::EmptyFusion) => return Ok(None),
                Err(e) => return Err(e),
            };
            let y_l_text = tok.decode(&loser)?;
            if y_w_text == y_l_text {
                return Ok(None);
            }
            let verdict = judge(&y_w_text, &y_l_text, &rec.query, &rec.scene, inventory, JUDGE_PENALTY);
            Ok(Some((
                PreferencePair {
                    scene_id: rec.id,
                    query: rec.query.clone(),
                    y_w_text,
                    y_l_text,
                    meta: PairMeta {
                        k: cfg.k,
                        augments: labels.clone(),
                        seeds,
                    },
                },
                verdict,
            )))
        })
        .collect::<Result<_>>()?;

    let kept: Vec<(PreferencePair, JudgeVerdict)> = built.into_iter().flatten().collect();
    let dropped = records.len() - kept.len();
    let n = kept.len().max(1) as f64;
    let wins = kept.iter().filter(|(_, v)| v.outcome == Outcome::WinA).count() as f64;
    let ties = kept.iter().filter(|(_, v)| v.outcome == Outcome::Tie).count() as f64;
    let manifest = PrefManifest {
        records: records.len(),
        kept: kept.len(),
        dropped,
        drop_rate: dropped as f64 / records.len().max(1) as f64,
        k: cfg.k,
        augments: labels,
        fusion: cfg.fusion,
        seed: cfg.seed,
        winner_rate: wins / n,
        tie_rate: ties / n,
    };
    Ok((kept.into_iter().map(|(p, _)| p).collect(), manifest))
}

/// Judge verdicts (winner as A) for a built dataset.
pub fn judge_pairs(pairs: &[PreferencePair], records: &[DatasetRecord], inventory: &SceneConfig) -> Result<Vec<JudgeVerdict>> {
    pairs
        .iter()
        .map(|p| {
            let rec = records
                .iter()
                .find(|r| r.id == p.scene_id)
                .ok_or_else(|| Error::InvalidInput(format!("scene {} not in dataset", p.scene_id)))?;
            Ok(judge(&p.y_w_text, &p.y_l_text, &p.query, &rec.scene, inventory, JUDGE_PENALTY))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_mle, ArchConfig, Example, MleHyper, ModelParams};
    use crate::scenegen::{make_dataset, SceneObject};

    fn inv() -> SceneConfig {
        SceneConfig::default()
    }

    fn scene(objs: &[(&str, f64)]) -> Scene {
        Scene {
            objects: objs
                .iter()
                .enumerate()
                .map(|(i, (n, s))| SceneObject {
                    name: n.to_string(),
                    attributes: vec!["red".into()],
                    salience: *s,
                    cell: (i as u32 / 4, i as u32 % 4),
                })
                .collect(),
            grid: (4, 4),
            rng_seed: 0,
        }
    }

    #[test]
    fn judge_examples() {
        let c = inv();
        let s = scene(&[("table", 0.9), ("cup", 0.8)]);
        let q = Query::caption();
        assert_eq!(judge("table cup", "table cup", &q, &s, &c, 2.0).outcome, Outcome::Tie);
        let v = judge("table cup", "table chair cup", &q, &s, &c, 2.0);
        assert_eq!(v.outcome, Outcome::WinA);
        assert_eq!((v.score_a, v.score_b), (2.0, 0.0));
        assert_eq!(judge("", "", &q, &s, &c, 2.0).outcome, Outcome::Tie);

        let p = Query::presence("chair");
        assert_eq!(judge("no", "yes", &p, &s, &c, 2.0).outcome, Outcome::WinA);
        let p = Query::presence("table");
        assert_eq!(judge("no", "yes", &p, &s, &c, 2.0).outcome, Outcome::WinB);
    }

    #[test]
    fn fusion_examples() {
        let c = inv();
        let q = Query::caption();
        assert_eq!(fuse(&["cup table".into()], &q, &c, &FusionMode::OracleUnion).unwrap(), "table cup");
        let f = fuse(&["a cat".into(), "a dog".into()], &q, &c, &FusionMode::OracleUnion).unwrap();
        assert_eq!(extract_mentions(&f, &c), BTreeSet::from(["cat".to_string(), "dog".to_string()]));
        assert_eq!(fuse(&["cat cup".into(), "cup kitty".into()], &q, &c, &FusionMode::OracleUnion).unwrap(), "cat cup");
        assert!(matches!(fuse(&["".into(), " ".into()], &q, &c, &FusionMode::OracleUnion), Err(Error::EmptyFusion)));
        let p = Query::presence("cat");
        assert_eq!(fuse(&["no".into(), "yes".into()], &p, &c, &FusionMode::OracleUnion).unwrap(), "yes");
        assert_eq!(fuse(&["no".into()], &p, &c, &FusionMode::OracleUnion).unwrap(), "no");
    }

    #[test]
    fn fusion_never_adds_objects() {
        let c = inv();
        let q = Query::caption();
        let cands: Vec<String> = vec!["table chair".into(), "street man".into(), "mug".into()];
        let fused = fuse(&cands, &q, &c, &FusionMode::OracleUnion).unwrap();
        let union: BTreeSet<String> = cands.iter().flat_map(|t| extract_mentions(t, &c)).collect();
        assert!(extract_mentions(&fused, &c).is_subset(&union));
    }

    #[test]
    fn k_zero_rejected() {
        let c = inv();
        let tok = Tokenizer::char_level(crate::tokenization::DEFAULT_ALPHABET.chars()).unwrap();
        let p = ModelParams::init(0, ArchConfig::default(), &tok).unwrap();
        let recs = make_dataset(2, 0, &c).unwrap();
        let cfg = PrefConfig {
            k: 0,
            ..PrefConfig::default()
        };
        let r = build_preference_dataset(&recs, Expert::new(&p, &tok).unwrap(), &c, &cfg);
        assert!(matches!(r, Err(Error::InvalidK(_))));
        let cfg = PrefConfig {
            k: 7,
            ..PrefConfig::default()
        };
        assert!(build_preference_dataset(&recs, Expert::new(&p, &tok).unwrap(), &c, &cfg).is_err());
    }

    /// Small model overfit to the exact caption of every view.
    fn overfit(tok: &Tokenizer, scenes: &[Scene]) -> ModelParams {
        let c = inv();
        let q = Query::caption();
        let mut corpus = Vec::new();
        for s in scenes {
            let mut views = vec![render_view(s, &c.render)];
            views.push(augment(s, &AugmentKind::identity(), 0, &c.render).unwrap());
            for v in views {
                corpus.push(Example {
                    query: tok.encode(q.text()),
                    observation: v.tokens(tok),
                    response: with_eos(tok.encode(&c.canonical_caption(v.visible_names()))),
                });
            }
        }
        let arch = ArchConfig {
            embed_dim: 12,
            hidden_dim: 32,
            recent: 3,
            context_window: 128,
        };
        let init = ModelParams::init(3, arch, tok).unwrap();
        let hyper = MleHyper {
            lr: 0.02,
            epochs: 150,
            batch_size: 4,
            ..MleHyper::default()
        };
        train_mle(&init, &corpus, &hyper).unwrap().0
    }

    fn name_tokenizer() -> Tokenizer {
        let c = inv();
        let corpus: Vec<String> = c.names().map(|n| format!("{n} {n} {n}")).collect();
        Tokenizer::merged(&corpus, 60).unwrap()
    }

    #[test]
    fn loser_on_clear_scene_is_ground_truth_and_identity_candidate_matches() {
        let tok = name_tokenizer();
        let c = inv();
        let scenes = vec![scene(&[("cat", 0.9), ("cup", 0.8)]), scene(&[("tree", 0.9)])];
        let p = overfit(&tok, &scenes);
        let e = Expert::new(&p, &tok).unwrap();
        let q = Query::caption();
        for s in &scenes {
            let y = gen_loser(e, &q, s, &c, 20).unwrap();
            assert_eq!(tok.decode(&y).unwrap(), crate::scenegen::truth_response(s, &q, &c));
            assert_eq!(gen_loser(e, &q, s, &c, 20).unwrap(), y);
            let cands = gen_candidates(e, &q, s, &c, &[AugmentKind::identity()], &[5], CandidatePolicy::Greedy, 20).unwrap();
            assert_eq!(cands, vec![y]);
        }
    }

    #[test]
    fn dataset_is_reproducible_and_valid() {
        let tok = name_tokenizer();
        let c = inv();
        let recs = make_dataset(12, 4, &c).unwrap();
        let p = ModelParams::init(5, ArchConfig::default(), &tok).unwrap();
        let e = Expert::new(&p, &tok).unwrap();
        let cfg = PrefConfig {
            max_len: 8,
            ..PrefConfig::default()
        };
        let (a, ma) = build_preference_dataset(&recs, e, &c, &cfg).unwrap();
        let (b, mb) = build_preference_dataset(&recs, e, &c, &cfg).unwrap();
        assert_eq!(crate::scenegen::write_jsonl(&a).unwrap(), crate::scenegen::write_jsonl(&b).unwrap());
        assert_eq!(ma, mb);
        assert_eq!(ma.kept + ma.dropped, 12);
        for pair in &a {
            assert_ne!(pair.y_w_text, pair.y_l_text);
            let (w, l) = pair.tokens(&tok);
            assert_eq!(w.last(), Some(&EOS));
            assert_eq!(l.last(), Some(&EOS));
            assert!(recs.iter().any(|r| r.id == pair.scene_id));
        }
    }
}
