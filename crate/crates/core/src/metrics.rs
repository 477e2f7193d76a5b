// SPDX-License-Identifier: Apache-2.0

//! CHAIR and POPE-style hallucination metrics, judge win rates, and the sweep
//! tables built from them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, DecodeInput, Expert, GuidedDecoder};
use crate::error::{Error, Result};
use crate::prefgen::{JudgeVerdict, Outcome};
use crate::scenegen::{Query, Scene, SceneConfig};
use crate::seed::{derive_seed, rng};

/// Object names mentioned in `text`: longest match against inventory names
/// and synonyms at word boundaries, case-insensitive.
pub fn extract_mentions(text: &str, inventory: &SceneConfig) -> BTreeSet<String> {
    let mut surfaces: Vec<(String, &str)> = Vec::new();
    for spec in &inventory.objects {
        surfaces.push((spec.name.to_lowercase(), &spec.name));
        for syn in &spec.synonyms {
            surfaces.push((syn.to_lowercase(), &spec.name));
        }
    }
    surfaces.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));

    let lower: Vec<char> = text.to_lowercase().chars().collect();
    let is_word = |c: char| c.is_alphanumeric();
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < lower.len() {
        if i > 0 && is_word(lower[i - 1]) {
            i += 1;
            continue;
        }
        let hit = surfaces.iter().find(|(s, _)| {
            let n = s.chars().count();
            i + n <= lower.len()
                && lower[i..i + n].iter().copied().eq(s.chars())
                && (i + n == lower.len() || !is_word(lower[i + n]))
        });
        match hit {
            Some((s, name)) => {
                found.insert(name.to_string());
                i += s.chars().count();
            }
            None => i += 1,
        }
    }
    found
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEval {
    pub mentioned: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
    pub scene_objects: BTreeSet<String>,
}

impl CaptionEval {
    pub fn new(caption: &str, scene: &Scene, inventory: &SceneConfig) -> Self {
        let mentioned = extract_mentions(caption, inventory);
        let scene_objects: BTreeSet<String> = scene.objects.iter().map(|o| o.name.clone()).collect();
        let hallucinated = mentioned.difference(&scene_objects).cloned().collect();
        CaptionEval {
            mentioned,
            hallucinated,
            scene_objects,
        }
    }
}

/// Hallucinated mentions over all mentions; 0 when nothing was mentioned.
pub fn chair_i(evals: &[CaptionEval]) -> f64 {
    let mentioned: usize = evals.iter().map(|e| e.mentioned.len()).sum();
    if mentioned == 0 {
        return 0.0;
    }
    evals.iter().map(|e| e.hallucinated.len()).sum::<usize>() as f64 / mentioned as f64
}

/// Fraction of captions with at least one hallucinated object.
pub fn chair_s(evals: &[CaptionEval]) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::InvalidInput("chair_s needs at least one caption".into()));
    }
    Ok(evals.iter().filter(|e| !e.hallucinated.is_empty()).count() as f64 / evals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeSplit {
    Rand,
    Pop,
    Adv,
}

impl PopeSplit {
    pub const ALL: [PopeSplit; 3] = [PopeSplit::Rand, PopeSplit::Pop, PopeSplit::Adv];

    pub fn label(self) -> &'static str {
        match self {
            PopeSplit::Rand => "rand",
            PopeSplit::Pop => "pop",
            PopeSplit::Adv => "adv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub scene_index: usize,
    pub split: PopeSplit,
    pub object: String,
    pub present: bool,
}

/// Balanced presence probes: even-numbered probes ask about a present object,
/// odd ones about an absent object drawn per split.
pub fn sample_probes(scenes: &[Scene], inventory: &SceneConfig, probes_per_scene: usize, seed: u64) -> Vec<Probe> {
    let names: Vec<&str> = inventory.names().collect();
    let mut freq = vec![0usize; names.len()];
    for s in scenes {
        for o in &s.objects {
            if let Some(i) = inventory.index_of(&o.name) {
                freq[i] += 1;
            }
        }
    }
    let co = inventory.cooccurrence_matrix();
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let present: Vec<&str> = scene.objects.iter().map(|o| o.name.as_str()).collect();
        let absent: Vec<usize> = (0..names.len()).filter(|&i| !scene.contains(names[i])).collect();
        for (k, split) in PopeSplit::ALL.into_iter().enumerate() {
            let mut r = rng(derive_seed(seed, k as u64 + 1, si as u64));
            for j in 0..probes_per_scene {
                if j % 2 == 0 || absent.is_empty() {
                    out.push(Probe {
                        scene_index: si,
                        split,
                        object: present.choose(&mut r).expect("non-empty scene").to_string(),
                        present: true,
                    });
                    continue;
                }
                let weights: Vec<f64> = match split {
                    PopeSplit::Rand => vec![1.0; absent.len()],
                    PopeSplit::Pop => absent.iter().map(|&i| freq[i] as f64 + 1.0).collect(),
                    PopeSplit::Adv => absent
                        .iter()
                        .map(|&i| {
                            present
                                .iter()
                                .filter_map(|p| inventory.index_of(p))
                                .map(|p| co[p][i] + co[i][p])
                                .sum::<f64>()
                        })
                        .collect(),
                };
                let pick = weighted_pick(&weights, &mut r).map(|w| absent[w]).unwrap_or_else(|| *absent.choose(&mut r).unwrap());
                out.push(Probe {
                    scene_index: si,
                    split,
                    object: names[pick].to_string(),
                    present: false,
                });
            }
        }
    }
    out
}

fn weighted_pick(weights: &[f64], r: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = r.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 && *w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// First standalone "yes" or "no" in a response.
pub fn parse_answer(text: &str) -> Option<bool> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|w| match w {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
}

/// Produces a response for a query about a scene.
pub trait Responder: Sync {
    fn respond(&self, scene: &Scene, query: &Query, seed: u64) -> Result<String>;
}

/// A guided decoder fed the plain rendered view of each scene.
pub struct SceneDecoder<'a> {
    pub decoder: GuidedDecoder<'a>,
    pub inventory: &'a SceneConfig,
}

impl Responder for SceneDecoder<'_> {
    fn respond(&self, scene: &Scene, query: &Query, seed: u64) -> Result<String> {
        let input = DecodeInput::for_scene(scene, query.text(), &self.inventory.render, seed)?;
        Ok(self.decoder.decode(&input)?.text)
    }
}

/// Reads the scene directly; the upper bound for every metric.
pub struct OracleResponder<'a>(pub &'a SceneConfig);

impl Responder for OracleResponder<'_> {
    fn respond(&self, scene: &Scene, query: &Query, _seed: u64) -> Result<String> {
        Ok(crate::scenegen::truth_response(scene, query, self.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitScore {
    pub probes: usize,
    pub correct: usize,
    pub yes: usize,
    pub unparseable: usize,
}

impl SplitScore {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.probes.max(1) as f64
    }

    pub fn yes_ratio(&self) -> f64 {
        self.yes as f64 / self.probes.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub rand: SplitScore,
    pub pop: SplitScore,
    pub adv: SplitScore,
}

impl PopeReport {
    pub fn split(&self, s: PopeSplit) -> &SplitScore {
        match s {
            PopeSplit::Rand => &self.rand,
            PopeSplit::Pop => &self.pop,
            PopeSplit::Adv => &self.adv,
        }
    }

    /// Unweighted mean of the three split accuracies.
    pub fn overall(&self) -> f64 {
        PopeSplit::ALL.iter().map(|&s| self.split(s).accuracy()).sum::<f64>() / 3.0
    }

    pub fn total_probes(&self) -> usize {
        PopeSplit::ALL.iter().map(|&s| self.split(s).probes).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeAnswer {
    pub probe: Probe,
    pub response: String,
}

pub fn score_probes(answers: &[ProbeAnswer]) -> PopeReport {
    let mut rep = PopeReport {
        rand: SplitScore::default(),
        pop: SplitScore::default(),
        adv: SplitScore::default(),
    };
    for a in answers {
        let s = match a.probe.split {
            PopeSplit::Rand => &mut rep.rand,
            PopeSplit::Pop => &mut rep.pop,
            PopeSplit::Adv => &mut rep.adv,
        };
        s.probes += 1;
        match parse_answer(&a.response) {
            Some(yes) => {
                s.yes += yes as usize;
                s.correct += (yes == a.probe.present) as usize;
            }
            None => s.unparseable += 1,
        }
    }
    rep
}

/// Asks every probe of [`sample_probes`] and scores the answers.
pub fn pope_probe(
    responder: &dyn Responder,
    scenes: &[Scene],
    inventory: &SceneConfig,
    probes_per_scene: usize,
    seed: u64,
) -> Result<(PopeReport, Vec<ProbeAnswer>)> {
    let probes = sample_probes(scenes, inventory, probes_per_scene, seed);
    let answers: Vec<ProbeAnswer> = probes
        .into_par_iter()
        .enumerate()
        .map(|(i, probe)| {
            let q = Query::presence(&probe.object);
            let response = responder.respond(&scenes[probe.scene_index], &q, derive_seed(seed, 9, i as u64))?;
            Ok(ProbeAnswer { probe, response })
        })
        .collect::<Result<_>>()?;
    Ok((score_probes(&answers), answers))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win_a: f64,
    pub win_b: f64,
    pub tie: f64,
}

pub fn win_rate(verdicts: &[JudgeVerdict]) -> Result<WinRate> {
    if verdicts.is_empty() {
        return Err(Error::InvalidInput("win_rate needs at least one verdict".into()));
    }
    let n = verdicts.len();
    let count = |o: Outcome| verdicts.iter().filter(|v| v.outcome == o).count();
    let (a, b) = (count(Outcome::WinA), count(Outcome::WinB));
    let tie = n - a - b;
    Ok(WinRate {
        win_a: a as f64 / n as f64,
        win_b: b as f64 / n as f64,
        tie: tie as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub scenes: usize,
    pub probes_per_scene: usize,
    /// Set from the run seeds; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenes: 500,
            probes_per_scene: 2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_index: usize,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub chair_s: f64,
    pub chair_i: f64,
    /// Set when no caption mentioned any object, so `chair_i` is a placeholder 0.
    pub no_mentions: bool,
    pub pope: PopeReport,
    pub captions: Vec<CaptionRecord>,
    pub answers: Vec<ProbeAnswer>,
}

/// CHAIR from stored captions, so traces can be re-scored offline.
pub fn chair_from_captions(records: &[CaptionRecord], scenes: &[Scene], inventory: &SceneConfig) -> Result<(f64, f64)> {
    let evals: Vec<CaptionEval> = records
        .iter()
        .map(|r| CaptionEval::new(&r.caption, &scenes[r.scene_index], inventory))
        .collect();
    Ok((chair_s(&evals)?, chair_i(&evals)))
}

pub fn evaluate(responder: &dyn Responder, scenes: &[Scene], inventory: &SceneConfig, cfg: &EvalConfig) -> Result<EvalMetrics> {
    let caption_q = Query::caption();
    let captions: Vec<CaptionRecord> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(CaptionRecord {
                scene_index: i,
                caption: responder.respond(s, &caption_q, derive_seed(cfg.seed, 8, i as u64))?,
            })
        })
        .collect::<Result<_>>()?;
    let (cs, ci) = chair_from_captions(&captions, scenes, inventory)?;
    let no_mentions = captions.iter().all(|c| extract_mentions(&c.caption, inventory).is_empty());
    if no_mentions {
        log::warn!("no caption mentioned any object; chair_i reported as 0");
    }
    let (pope, answers) = pope_probe(responder, scenes, inventory, cfg.probes_per_scene, cfg.seed)?;
    Ok(EvalMetrics {
        chair_s: cs,
        chair_i: ci,
        no_mentions,
        pope,
        captions,
        answers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub pope_rand: f64,
    pub pope_pop: f64,
    pub pope_adv: f64,
    pub pope_overall: f64,
    pub yes_ratio: f64,
}

impl SweepRow {
    pub fn from_metrics(lambda: f64, m: &EvalMetrics) -> Self {
        let yes: usize = PopeSplit::ALL.iter().map(|&s| m.pope.split(s).yes).sum();
        SweepRow {
            lambda,
            chair_s: m.chair_s,
            chair_i: m.chair_i,
            pope_rand: m.pope.rand.accuracy(),
            pope_pop: m.pope.pop.accuracy(),
            pope_adv: m.pope.adv.accuracy(),
            pope_overall: m.pope.overall(),
            yes_ratio: yes as f64 / m.pope.total_probes().max(1) as f64,
        }
    }
}

/// Guided decoding at each lambda of `grid` (sorted ascending, duplicates dropped).
pub fn run_lambda_sweep(
    target: Expert,
    reward: Expert,
    scenes: &[Scene],
    inventory: &SceneConfig,
    decode: &DecodeConfig,
    eval: &EvalConfig,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut lambdas = grid.to_vec();
    if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidConfig(format!("lambda grid must be finite and >= 0: {grid:?}")));
    }
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    lambdas
        .into_iter()
        .map(|lambda| {
            let cfg = DecodeConfig { lambda, ..*decode };
            let responder = SceneDecoder {
                decoder: GuidedDecoder::new(target, Some(reward), cfg)?,
                inventory,
            };
            let m = evaluate(&responder, scenes, inventory, eval)?;
            log::info!("lambda {lambda}: chair_s {:.4} pope {:.4}", m.chair_s, m.pope.overall());
            Ok(SweepRow::from_metrics(lambda, &m))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub holdout_margin_acc: f64,
    pub drop_rate: f64,
    pub metrics: SweepRow,
}

/// Drives one full rebuild per K; `run` builds the preference data, trains
/// the reward model and evaluates it.
pub fn run_fusion_ablation(ks: &[usize], mut run: impl FnMut(usize) -> Result<AblationRow>) -> Result<Vec<AblationRow>> {
    if ks.contains(&0) {
        return Err(Error::InvalidK("K must be at least 1".into()));
    }
    ks.iter().map(|&k| run(k)).collect()
}

pub const SWEEP_CSV_HEADER: &str = "lambda,chair_s,chair_i,pope_rand,pope_pop,pope_adv,pope_overall,yes_ratio";

fn sweep_fields(r: &SweepRow) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.chair_s, r.chair_i, r.pope_rand, r.pope_pop, r.pope_adv, r.pope_overall, r.yes_ratio
    )
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{:.3},{}", r.lambda, sweep_fields(r));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,holdout_margin_acc,drop_rate,lambda,chair_s,chair_i,pope_rand,pope_pop,pope_adv,pope_overall,yes_ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.3},{}",
            r.k,
            r.holdout_margin_acc,
            r.drop_rate,
            r.metrics.lambda,
            sweep_fields(&r.metrics)
        );
    }
    out
}

/// Markdown report with both tables and the effective configuration.
pub fn summary_markdown(sweep: &[SweepRow], ablation: &[AblationRow], config_echo: &str) -> String {
    let mut out = String::from("# Evaluation summary\n\n## Guidance strength sweep\n\n");
    out.push_str("| lambda | CHAIR_s | CHAIR_i | POPE rand | POPE pop | POPE adv | POPE mean |\n|---|---|---|---|---|---|---|\n");
    for r in sweep {
        let _ = writeln!(
            out,
            "| {:.2} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.lambda, r.chair_s, r.chair_i, r.pope_rand, r.pope_pop, r.pope_adv, r.pope_overall
        );
    }
    if !ablation.is_empty() {
        out.push_str("\n## Fusion ablation\n\n| K | margin acc | drop rate | CHAIR_s | CHAIR_i | POPE mean |\n|---|---|---|---|---|---|\n");
        for r in ablation {
            let _ = writeln!(
                out,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.k, r.holdout_margin_acc, r.drop_rate, r.metrics.chair_s, r.metrics.chair_i, r.metrics.pope_overall
            );
        }
    }
    out.push_str("\n## Configuration\n\n```toml\n");
    out.push_str(config_echo);
    if !config_echo.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("```\n");
    out
}
