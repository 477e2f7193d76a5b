// SPDX-License-Identifier: Apache-2.0

//! Staged end-to-end run: data, base model, preference pairs, reward model,
//! evaluation and sweeps. Every stage writes its artifacts plus a manifest of
//! input and output hashes under one working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::{Combinator, DecodeConfig, Expert, GuidedDecoder};
use crate::dpo::{train_reward, DpoHyper, DpoPair, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{
    ablation_csv, evaluate, run_fusion_ablation, run_lambda_sweep, summary_markdown, sweep_csv, AblationRow, EvalConfig,
    EvalMetrics, SceneDecoder, SweepRow,
};
use crate::model::{train_mle, ArchConfig, Example, MleHyper, MleReport, ModelParams};
use crate::prefgen::{build_preference_dataset, PrefConfig, PrefManifest, PreferencePair};
use crate::scenegen::{
    augment, make_dataset, read_jsonl, reference_response, render_view, truth_response, write_jsonl, AugmentKind,
    DatasetRecord, Query, Scene, SceneConfig,
};
use crate::seed::derive_seed;
use crate::tokenization::{Tokenizer, EOS};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Records shared by base-model training and preference construction.
    pub records: usize,
    pub eval_scenes: usize,
    /// Augmented views added to the maximum-likelihood corpus next to each plain view.
    pub corpus_views: Vec<AugmentKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            records: 6000,
            eval_scenes: 500,
            corpus_views: vec![AugmentKind::crop(), AugmentKind::contrast(), AugmentKind::gamma()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub target_merges: usize,
    pub reward_merges: usize,
    pub target_corpus: CorpusKind,
    pub reward_corpus: CorpusKind,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            target_merges: 150,
            reward_merges: 110,
            target_corpus: CorpusKind::Full,
            reward_corpus: CorpusKind::Dialogue,
        }
    }
}

/// Which texts a tokenizer is learned from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Queries, rendered views and answers.
    Full,
    /// Queries and answers only. Observation text falls back to short pieces.
    Dialogue,
}

/// Per-stage seeds. Unset entries derive from `global`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub global: u64,
    pub data: Option<u64>,
    pub base: Option<u64>,
    pub prefs: Option<u64>,
    pub reward: Option<u64>,
    pub eval: Option<u64>,
}

impl Seeds {
    fn get(&self, stage: Stage) -> u64 {
        let explicit = match stage {
            Stage::GenData => self.data,
            Stage::TrainBase => self.base,
            Stage::BuildPrefs => self.prefs,
            Stage::TrainReward => self.reward,
            Stage::Eval | Stage::Sweep => self.eval,
        };
        explicit.unwrap_or_else(|| derive_seed(self.global, 100 + stage as u64, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub fusion_ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            fusion_ks: vec![1, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub data: DataConfig,
    pub tokenizers: TokenizerConfig,
    pub scene: SceneConfig,
    pub target_arch: ArchConfig,
    pub reward_arch: ArchConfig,
    pub base_training: MleHyper,
    pub reward_pretraining: MleHyper,
    pub prefs: PrefConfig,
    pub dpo: DpoHyper,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        RunConfig {
            seeds: Seeds::default(),
            data: DataConfig::default(),
            tokenizers: TokenizerConfig::default(),
            scene: SceneConfig::default(),
            target_arch: arch,
            reward_arch: arch,
            base_training: MleHyper::default(),
            reward_pretraining: MleHyper {
                epochs: 6,
                ..MleHyper::default()
            },
            prefs: PrefConfig::default(),
            dpo: DpoHyper::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.target_arch.validate()?;
        self.reward_arch.validate()?;
        self.prefs.validate()?;
        self.dpo.validate()?;
        self.decode.validate()?;
        if self.data.records == 0 || self.data.eval_scenes == 0 {
            return Err(Error::InvalidSize("records and eval_scenes must be at least 1".into()));
        }
        self.data.corpus_views.iter().try_for_each(AugmentKind::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainBase,
    BuildPrefs,
    TrainReward,
    Eval,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenData,
        Stage::TrainBase,
        Stage::BuildPrefs,
        Stage::TrainReward,
        Stage::Eval,
        Stage::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBase => "train-base",
            Stage::BuildPrefs => "build-prefs",
            Stage::TrainReward => "train-reward",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
        }
    }
}

/// Artifact paths, relative to the working directory.
pub mod paths {
    pub const DATASET: &str = "data/dataset.jsonl";
    pub const EVAL_SET: &str = "data/eval.jsonl";
    pub const TARGET_TOKENIZER: &str = "tokenizers/target.json";
    pub const REWARD_TOKENIZER: &str = "tokenizers/reward.json";
    pub const BASE_MODEL: &str = "checkpoints/base.json";
    pub const BASE_REPORT: &str = "reports/train_base.json";
    pub const PREFS: &str = "prefs/prefs.jsonl";
    pub const PREFS_MANIFEST: &str = "prefs/manifest.json";
    pub const REWARD_INIT: &str = "checkpoints/reward_init.json";
    pub const REWARD_MODEL: &str = "checkpoints/reward.json";
    pub const REWARD_REPORT: &str = "reports/train_reward.json";
    pub const EVAL_JSON: &str = "reports/eval.json";
    pub const EVAL_CSV: &str = "reports/eval.csv";
    pub const EVAL_CAPTIONS: &str = "reports/eval_captions.jsonl";
    pub const SWEEP_CSV: &str = "reports/sweep_lambda.csv";
    pub const ABLATION_CSV: &str = "reports/fusion_ablation.csv";
    pub const SUMMARY: &str = "reports/summary.md";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub tool_version: String,
    pub seed: u64,
    /// Hash of the configuration sections this stage reads.
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// The full effective configuration.
    pub config_echo: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub struct Pipeline {
    root: PathBuf,
    cfg: RunConfig,
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { root: root.into(), cfg })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<Option<Manifest>> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Absolute path for `rel` with its parent directory created.
    fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.prepare(rel)?;
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn read(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    fn stage_config(&self, stage: Stage) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let seed = c.seeds.get(stage);
        Ok(match stage {
            Stage::GenData => serde_json::json!({
                "seed": seed, "data": c.data, "tokenizers": c.tokenizers, "scene": c.scene,
            }),
            Stage::TrainBase => serde_json::json!({
                "seed": seed, "arch": c.target_arch, "mle": c.base_training, "views": c.data.corpus_views,
            }),
            Stage::BuildPrefs => serde_json::json!({ "seed": seed, "prefs": c.prefs }),
            Stage::TrainReward => serde_json::json!({
                "seed": seed, "arch": c.reward_arch, "mle": c.reward_pretraining, "dpo": c.dpo,
                "views": c.data.corpus_views,
            }),
            Stage::Eval => serde_json::json!({ "seed": seed, "decode": c.decode, "eval": c.eval }),
            Stage::Sweep => serde_json::json!({
                "seed": seed, "decode": c.decode, "eval": c.eval, "sweep": c.sweep, "prefs": c.prefs,
                "dpo": c.dpo, "reward_seed": c.seeds.get(Stage::TrainReward),
            }),
        })
    }

    /// Verifies each input against the manifest of the stage that produced it.
    fn check_inputs(&self, inputs: &[(Stage, &str)]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for &(upstream, rel) in inputs {
            let path = self.path(rel);
            let expected = self
                .read_manifest(upstream)?
                .and_then(|m| m.outputs.get(rel).cloned())
                .unwrap_or_else(|| format!("<no {} manifest entry>", upstream.name()));
            if !path.exists() {
                return Err(Error::StaleArtifact {
                    path,
                    expected,
                    actual: "<missing>".into(),
                });
            }
            let actual = hash_file(&path)?;
            if actual != expected {
                return Err(Error::StaleArtifact { path, expected, actual });
            }
            out.insert(rel.to_string(), actual);
        }
        Ok(out)
    }

    fn run_stage(
        &self,
        stage: Stage,
        inputs: &[(Stage, &str)],
        outputs: &[&str],
        force: bool,
        body: impl FnOnce() -> Result<()>,
    ) -> Result<StageOutcome> {
        let input_hashes = self.check_inputs(inputs)?;
        let config_hash = sha256_hex(serde_json::to_string(&self.stage_config(stage)?)?.as_bytes());
        if !force {
            if let Some(m) = self.read_manifest(stage)? {
                let outputs_ok = outputs.iter().all(|rel| {
                    let p = self.path(rel);
                    p.exists() && m.outputs.get(*rel).is_some_and(|h| hash_file(&p).is_ok_and(|a| &a == h))
                });
                if m.config_hash == config_hash && m.inputs == input_hashes && m.tool_version == TOOL_VERSION && outputs_ok {
                    log::info!("{}: up to date", stage.name());
                    return Ok(StageOutcome::UpToDate);
                }
            }
        }
        log::info!("{}: running", stage.name());
        body()?;
        let mut out_hashes = BTreeMap::new();
        for rel in outputs {
            out_hashes.insert(rel.to_string(), hash_file(&self.path(rel))?);
        }
        let manifest = Manifest {
            stage,
            tool_version: TOOL_VERSION.into(),
            seed: self.cfg.seeds.get(stage),
            config_hash,
            inputs: input_hashes,
            outputs: out_hashes,
            config_echo: self.cfg.to_toml()?,
        };
        self.write(
            &format!("manifests/{}.json", stage.name()),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(StageOutcome::Ran)
    }

    pub fn run(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        match stage {
            Stage::GenData => self.gen_data(force),
            Stage::TrainBase => self.train_base(force),
            Stage::BuildPrefs => self.build_prefs(force),
            Stage::TrainReward => self.train_reward(force),
            Stage::Eval => self.eval(force),
            Stage::Sweep => self.sweep(force),
        }
    }

    pub fn run_all(&self, force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run(s, force)?))).collect()
    }

    pub fn gen_data(&self, force: bool) -> Result<StageOutcome> {
        let outputs = [paths::DATASET, paths::EVAL_SET, paths::TARGET_TOKENIZER, paths::REWARD_TOKENIZER];
        self.run_stage(Stage::GenData, &[], &outputs, force, || {
            let c = &self.cfg;
            let seed = c.seeds.get(Stage::GenData);
            let records = make_dataset(c.data.records, seed, &c.scene)?;
            let eval = make_dataset(c.data.eval_scenes, derive_seed(seed, 77, 0), &c.scene)?;
            let t = &c.tokenizers;
            let target = Tokenizer::merged(&corpus_of(t.target_corpus, &records, &c.scene), t.target_merges)?;
            let reward = Tokenizer::merged(&corpus_of(t.reward_corpus, &records, &c.scene), t.reward_merges)?;
            self.write(paths::DATASET, write_jsonl(&records)?)?;
            self.write(paths::EVAL_SET, write_jsonl(&eval)?)?;
            target.save(&self.prepare(paths::TARGET_TOKENIZER)?)?;
            reward.save(&self.prepare(paths::REWARD_TOKENIZER)?)
        })
    }

    pub fn load_records(&self, rel: &str) -> Result<Vec<DatasetRecord>> {
        read_jsonl(&self.read(rel)?)
    }

    pub fn load_tokenizer(&self, rel: &str) -> Result<Tokenizer> {
        Tokenizer::load(&self.path(rel))
    }

    pub fn train_base(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [(Stage::GenData, paths::DATASET), (Stage::GenData, paths::TARGET_TOKENIZER)];
        self.run_stage(Stage::TrainBase, &inputs, &[paths::BASE_MODEL, paths::BASE_REPORT], force, || {
            let c = &self.cfg;
            let seed = c.seeds.get(Stage::TrainBase);
            let records = self.load_records(paths::DATASET)?;
            let tok = self.load_tokenizer(paths::TARGET_TOKENIZER)?;
            let (params, report) = pretrain(&records, &tok, c, c.target_arch, &c.base_training, seed)?;
            params.save(&self.prepare(paths::BASE_MODEL)?)?;
            self.write(paths::BASE_REPORT, serde_json::to_string_pretty(&report)?)
        })
    }

    pub fn load_model(&self, rel: &str, tok: &Tokenizer) -> Result<ModelParams> {
        ModelParams::load(&self.path(rel), tok)
    }

    pub fn build_prefs(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [
            (Stage::GenData, paths::DATASET),
            (Stage::GenData, paths::TARGET_TOKENIZER),
            (Stage::TrainBase, paths::BASE_MODEL),
        ];
        self.run_stage(Stage::BuildPrefs, &inputs, &[paths::PREFS, paths::PREFS_MANIFEST], force, || {
            let records = self.load_records(paths::DATASET)?;
            let tok = self.load_tokenizer(paths::TARGET_TOKENIZER)?;
            let base = self.load_model(paths::BASE_MODEL, &tok)?;
            let prefs = PrefConfig {
                seed: self.cfg.seeds.get(Stage::BuildPrefs),
                ..self.cfg.prefs.clone()
            };
            let (pairs, manifest) = build_preference_dataset(&records, Expert::new(&base, &tok)?, &self.cfg.scene, &prefs)?;
            log::info!(
                "build-prefs: kept {} of {} (drop rate {:.3}), winner preferred in {:.3}",
                manifest.kept,
                manifest.records,
                manifest.drop_rate,
                manifest.winner_rate
            );
            self.write(paths::PREFS, write_jsonl(&pairs)?)?;
            self.write(paths::PREFS_MANIFEST, serde_json::to_string_pretty(&manifest)?)
        })
    }

    pub fn train_reward(&self, force: bool) -> Result<StageOutcome> {
        let inputs = [
            (Stage::GenData, paths::DATASET),
            (Stage::GenData, paths::REWARD_TOKENIZER),
            (Stage::BuildPrefs, paths::PREFS),
        ];
        let outputs = [paths::REWARD_INIT, paths::REWARD_MODEL, paths::REWARD_REPORT];
        self.run_stage(Stage::TrainReward, &inputs, &outputs, force, || {
            let c = &self.cfg;
            let seed = c.seeds.get(Stage::TrainReward);
            let records = self.load_records(paths::DATASET)?;
            let tok = self.load_tokenizer(paths::REWARD_TOKENIZER)?;
            let pairs: Vec<PreferencePair> = read_jsonl(&self.read(paths::PREFS)?)?;
            let (init, _) = pretrain(&records, &tok, c, c.reward_arch, &c.reward_pretraining, derive_seed(seed, 1, 0))?;
            init.save(&self.prepare(paths::REWARD_INIT)?)?;
            let (reward, report) = fit_reward(&init, &tok, &pairs, &records, c, seed)?;
            reward.save(&self.prepare(paths::REWARD_MODEL)?)?;
            self.write(paths::REWARD_REPORT, serde_json::to_string_pretty(&report)?)
        })
    }

    fn eval_inputs() -> [(Stage, &'static str); 5] {
        [
            (Stage::GenData, paths::EVAL_SET),
            (Stage::GenData, paths::TARGET_TOKENIZER),
            (Stage::GenData, paths::REWARD_TOKENIZER),
            (Stage::TrainBase, paths::BASE_MODEL),
            (Stage::TrainReward, paths::REWARD_MODEL),
        ]
    }

    /// Target tokenizer and base model, checked against their manifests.
    pub fn load_target(&self) -> Result<(Tokenizer, ModelParams)> {
        self.check_inputs(&[
            (Stage::GenData, paths::TARGET_TOKENIZER),
            (Stage::TrainBase, paths::BASE_MODEL),
        ])?;
        let tok = self.load_tokenizer(paths::TARGET_TOKENIZER)?;
        let base = self.load_model(paths::BASE_MODEL, &tok)?;
        Ok((tok, base))
    }

    /// Reward tokenizer and trained reward model, checked against their manifests.
    pub fn load_reward(&self) -> Result<(Tokenizer, ModelParams)> {
        self.check_inputs(&[
            (Stage::GenData, paths::REWARD_TOKENIZER),
            (Stage::TrainReward, paths::REWARD_MODEL),
        ])?;
        let tok = self.load_tokenizer(paths::REWARD_TOKENIZER)?;
        let reward = self.load_model(paths::REWARD_MODEL, &tok)?;
        Ok((tok, reward))
    }

    pub fn load_experts(&self) -> Result<(Tokenizer, ModelParams, Tokenizer, ModelParams)> {
        let (tt, base) = self.load_target()?;
        let (rt, reward) = self.load_reward()?;
        Ok((tt, base, rt, reward))
    }

    /// Held-out evaluation scenes.
    pub fn eval_records(&self) -> Result<Vec<DatasetRecord>> {
        self.check_inputs(&[(Stage::GenData, paths::EVAL_SET)])?;
        self.load_records(paths::EVAL_SET)
    }

    fn eval_scenes(&self) -> Result<Vec<Scene>> {
        Ok(self.load_records(paths::EVAL_SET)?.into_iter().map(|r| r.scene).collect())
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.cfg.seeds.get(Stage::Eval),
            ..self.cfg.eval
        }
    }

    pub fn eval(&self, force: bool) -> Result<StageOutcome> {
        let outputs = [paths::EVAL_JSON, paths::EVAL_CSV, paths::EVAL_CAPTIONS];
        self.run_stage(Stage::Eval, &Self::eval_inputs(), &outputs, force, || {
            let (tt, base, rt, reward) = self.load_experts()?;
            let scenes = self.eval_scenes()?;
            let ecfg = self.eval_config();
            let inv = &self.cfg.scene;
            let run = |combinator: Combinator, lambda: f64| -> Result<EvalMetrics> {
                let cfg = DecodeConfig {
                    combinator,
                    lambda,
                    ..self.cfg.decode
                };
                let reward_expert = combinator.needs_reward().then(|| Expert::new(&reward, &rt)).transpose()?;
                let responder = SceneDecoder {
                    decoder: GuidedDecoder::new(Expert::new(&base, &tt)?, reward_expert, cfg)?,
                    inventory: inv,
                };
                evaluate(&responder, &scenes, inv, &ecfg)
            };
            let base_m = run(Combinator::Base, 0.0)?;
            let guided = run(self.cfg.decode.combinator, self.cfg.decode.lambda)?;
            let report = EvalReport {
                base: summary_of(&base_m),
                guided: summary_of(&guided),
                combinator: self.cfg.decode.combinator,
                lambda: self.cfg.decode.lambda,
            };
            self.write(paths::EVAL_JSON, serde_json::to_string_pretty(&report)?)?;
            let rows = [
                SweepRow::from_metrics(0.0, &base_m),
                SweepRow::from_metrics(self.cfg.decode.lambda, &guided),
            ];
            self.write(paths::EVAL_CSV, sweep_csv(&rows))?;
            self.write(paths::EVAL_CAPTIONS, write_jsonl(&guided.captions)?)
        })
    }

    pub fn sweep(&self, force: bool) -> Result<StageOutcome> {
        let mut inputs = Self::eval_inputs().to_vec();
        inputs.push((Stage::GenData, paths::DATASET));
        inputs.push((Stage::TrainReward, paths::REWARD_INIT));
        inputs.push((Stage::TrainReward, paths::REWARD_REPORT));
        inputs.push((Stage::BuildPrefs, paths::PREFS_MANIFEST));
        let outputs = [paths::SWEEP_CSV, paths::ABLATION_CSV, paths::SUMMARY];
        self.run_stage(Stage::Sweep, &inputs, &outputs, force, || {
            let sweep = self.lambda_sweep()?;
            self.write(paths::SWEEP_CSV, sweep_csv(&sweep))?;
            let ablation = self.fusion_ablation(&self.cfg.sweep.fusion_ks)?;
            self.write(paths::ABLATION_CSV, ablation_csv(&ablation))?;
            self.write(paths::SUMMARY, summary_markdown(&sweep, &ablation, &self.cfg.to_toml()?))
        })
    }

    /// Guided decoding over the configured lambda grid on the eval scenes.
    pub fn lambda_sweep(&self) -> Result<Vec<SweepRow>> {
        let (tt, base, rt, reward) = self.load_experts()?;
        let scenes = self.eval_scenes()?;
        let decode = DecodeConfig {
            combinator: Combinator::Guided,
            ..self.cfg.decode
        };
        run_lambda_sweep(
            Expert::new(&base, &tt)?,
            Expert::new(&reward, &rt)?,
            &scenes,
            &self.cfg.scene,
            &decode,
            &self.eval_config(),
            &self.cfg.sweep.lambdas,
        )
    }

    /// For each K: rebuild the preference pairs, retrain the reward model from
    /// the pretrained initialization, and evaluate at the configured lambda.
    /// The configured K reuses the stage artifacts, which are the same computation.
    pub fn fusion_ablation(&self, ks: &[usize]) -> Result<Vec<AblationRow>> {
        let c = &self.cfg;
        let (tt, base, rt, trained) = self.load_experts()?;
        self.check_inputs(&[
            (Stage::TrainReward, paths::REWARD_INIT),
            (Stage::TrainReward, paths::REWARD_REPORT),
            (Stage::BuildPrefs, paths::PREFS_MANIFEST),
        ])?;
        let init = self.load_model(paths::REWARD_INIT, &rt)?;
        let records = self.load_records(paths::DATASET)?;
        let scenes = self.eval_scenes()?;
        let target = Expert::new(&base, &tt)?;
        run_fusion_ablation(ks, |k| {
            let (reward, holdout_margin_acc, drop_rate) = if k == c.prefs.k {
                let report = self.reward_report()?;
                (trained.clone(), report.holdout_margin_acc, self.prefs_manifest()?.drop_rate)
            } else {
                let prefs = PrefConfig {
                    k,
                    seed: c.seeds.get(Stage::BuildPrefs),
                    ..c.prefs.clone()
                };
                let (pairs, manifest) = build_preference_dataset(&records, target, &c.scene, &prefs)?;
                let (reward, report) = fit_reward(&init, &rt, &pairs, &records, c, c.seeds.get(Stage::TrainReward))?;
                (reward, report.holdout_margin_acc, manifest.drop_rate)
            };
            let decode = DecodeConfig {
                combinator: Combinator::Guided,
                ..c.decode
            };
            let responder = SceneDecoder {
                decoder: GuidedDecoder::new(target, Some(Expert::new(&reward, &rt)?), decode)?,
                inventory: &c.scene,
            };
            let m = evaluate(&responder, &scenes, &c.scene, &self.eval_config())?;
            log::info!("fusion K={k}: drop rate {drop_rate:.3}, chair_s {:.4}", m.chair_s);
            Ok(AblationRow {
                k,
                holdout_margin_acc,
                drop_rate,
                metrics: SweepRow::from_metrics(c.decode.lambda, &m),
            })
        })
    }

    pub fn prefs_manifest(&self) -> Result<PrefManifest> {
        Ok(serde_json::from_str(&self.read(paths::PREFS_MANIFEST)?)?)
    }

    pub fn reward_report(&self) -> Result<TrainReport> {
        Ok(serde_json::from_str(&self.read(paths::REWARD_REPORT)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub chair_s: f64,
    pub chair_i: f64,
    pub no_mentions: bool,
    pub pope: crate::metrics::PopeReport,
    pub pope_overall: f64,
}

fn summary_of(m: &EvalMetrics) -> MetricSummary {
    MetricSummary {
        chair_s: m.chair_s,
        chair_i: m.chair_i,
        no_mentions: m.no_mentions,
        pope: m.pope.clone(),
        pope_overall: m.pope.overall(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base: MetricSummary,
    pub guided: MetricSummary,
    pub combinator: Combinator,
    pub lambda: f64,
}

/// Texts the tokenizers are learned from: queries, rendered views and answers.
pub fn tokenizer_corpus(records: &[DatasetRecord], inventory: &SceneConfig) -> Vec<String> {
    let mut out = Vec::with_capacity(records.len() * 3 + 2);
    for r in records {
        out.push(r.query.text().to_string());
        out.push(render_view(&r.scene, &inventory.render).text());
        out.push(truth_response(&r.scene, &Query::caption(), inventory));
    }
    out.push("yes no".into());
    out
}

/// Queries and answers without the rendered observations.
pub fn dialogue_corpus(records: &[DatasetRecord], inventory: &SceneConfig) -> Vec<String> {
    let mut out = Vec::with_capacity(records.len() * 2 + 1);
    for r in records {
        out.push(r.query.text().to_string());
        out.push(truth_response(&r.scene, &Query::caption(), inventory));
    }
    out.push("yes no".into());
    out
}

pub fn corpus_of(kind: CorpusKind, records: &[DatasetRecord], inventory: &SceneConfig) -> Vec<String> {
    match kind {
        CorpusKind::Full => tokenizer_corpus(records, inventory),
        CorpusKind::Dialogue => dialogue_corpus(records, inventory),
    }
}

/// Maximum-likelihood corpus: each record's plain view plus its augmented
/// views, answered by the reference writer.
pub fn mle_corpus(records: &[DatasetRecord], tok: &Tokenizer, cfg: &RunConfig, seed: u64) -> Result<Vec<Example>> {
    let inv = &cfg.scene;
    let per: Vec<Vec<Example>> = records
        .par_iter()
        .map(|rec| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, rec.id));
            let mut views = vec![render_view(&rec.scene, &inv.render)];
            for (i, kind) in cfg.data.corpus_views.iter().enumerate() {
                views.push(augment(&rec.scene, kind, derive_seed(seed, 6 + i as u64, rec.id), &inv.render)?);
            }
            let q = tok.encode(rec.query.text());
            Ok(views
                .iter()
                .map(|v| {
                    let mut response = tok.encode(&reference_response(v, &rec.query, inv, &mut r));
                    response.push(EOS);
                    Example {
                        query: q.clone(),
                        observation: v.tokens(tok),
                        response,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn pretrain(
    records: &[DatasetRecord],
    tok: &Tokenizer,
    cfg: &RunConfig,
    arch: ArchConfig,
    hyper: &MleHyper,
    seed: u64,
) -> Result<(ModelParams, MleReport)> {
    let corpus = mle_corpus(records, tok, cfg, seed)?;
    let init = ModelParams::init(derive_seed(seed, 2, 0), arch, tok)?;
    let hyper = MleHyper {
        seed: derive_seed(seed, 3, 0),
        ..*hyper
    };
    let (params, report) = train_mle(&init, &corpus, &hyper)?;
    log::info!(
        "mle: {} examples, nll/token {:.4} -> {:.4}",
        corpus.len(),
        report.initial_nll,
        report.epoch_nll.last().copied().unwrap_or(report.initial_nll)
    );
    Ok((params, report))
}

/// Tokenizes pairs for the reward model, conditioning on the plain view.
pub fn dpo_pairs(pairs: &[PreferencePair], records: &[DatasetRecord], tok: &Tokenizer, inventory: &SceneConfig) -> Result<Vec<DpoPair>> {
    let by_id: BTreeMap<u64, &DatasetRecord> = records.iter().map(|r| (r.id, r)).collect();
    pairs
        .iter()
        .map(|p| {
            let rec = by_id
                .get(&p.scene_id)
                .ok_or_else(|| Error::InvalidInput(format!("pair refers to unknown scene {}", p.scene_id)))?;
            let (y_w, y_l) = p.tokens(tok);
            Ok(DpoPair {
                scene_id: p.scene_id,
                query: tok.encode(p.query.text()),
                observation: render_view(&rec.scene, &inventory.render).tokens(tok),
                y_w,
                y_l,
            })
        })
        .collect()
}

fn fit_reward(
    init: &ModelParams,
    tok: &Tokenizer,
    pairs: &[PreferencePair],
    records: &[DatasetRecord],
    cfg: &RunConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    let dpo = dpo_pairs(pairs, records, tok, &cfg.scene)?;
    let hyper = DpoHyper { seed, ..cfg.dpo };
    let (params, report) = train_reward(init, &dpo, &hyper)?;
    log::info!(
        "dpo: {} pairs, loss {:.4} -> {:.4}, held-out margin acc {:.4}",
        dpo.len(),
        report.initial_loss,
        report.loss_per_epoch.last().copied().unwrap_or(report.initial_loss),
        report.holdout_margin_acc
    );
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        let partial = RunConfig::from_toml("[dpo]\nbeta = 0.2\n").unwrap();
        assert_eq!(partial.dpo.beta, 0.2);
        assert_eq!(partial.dpo.lr, cfg.dpo.lr);
        assert!(RunConfig::from_toml("[dpo]\nbogus = 1\nbeta = \"x\"").is_err());
    }

    #[test]
    fn stage_seeds_derive_from_global() {
        let mut s = Seeds::default();
        let a = s.get(Stage::TrainBase);
        s.global = 5;
        assert_ne!(a, s.get(Stage::TrainBase));
        s.base = Some(9);
        assert_eq!(s.get(Stage::TrainBase), 9);
    }

    #[test]
    fn missing_upstream_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(dir.path(), RunConfig::default()).unwrap();
        match p.train_base(false) {
            Err(Error::StaleArtifact { actual, .. }) => assert_eq!(actual, "<missing>"),
            other => panic!("expected stale artifact, got {other:?}"),
        }
    }
}
