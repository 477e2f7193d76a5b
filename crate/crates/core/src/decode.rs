// SPDX-License-Identifier: Apache-2.0

//! Token-level guided decoding: the frozen target's next-token distribution is
//! multiplied by the reward model's distribution raised to `lambda`, with the
//! reward distribution carried across tokenizers by a top-k decode/re-encode map.
//! Contrastive baselines share the same loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathutil::{argmax, log_softmax_in_place, top_k_indices};
use crate::model::{Conditioned, ModelParams};
use crate::scenegen::{augment, render_view, AugmentKind, RenderConfig, Scene};
use crate::tokenization::{Special, TokenId, Tokenizer, EOS};

/// Anything that yields a normalized next-token log-distribution for a prefix
/// of its own token ids.
pub trait StepModel: Sync {
    fn vocab_size(&self) -> usize;
    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// A model with its (query, observation) conditioning fixed.
pub struct BoundModel<'a> {
    params: &'a ModelParams,
    cond: Conditioned<'a>,
    fixed_len: usize,
}

impl<'a> BoundModel<'a> {
    pub fn new(params: &'a ModelParams, query: &[TokenId], observation: &[TokenId]) -> Result<Self> {
        let ctx = crate::model::ContextEncoding {
            query: query.to_vec(),
            observation: observation.to_vec(),
            prefix: Vec::new(),
        };
        params.check_context(&ctx)?;
        Ok(BoundModel {
            params,
            cond: Conditioned::new(params, query, observation),
            fixed_len: ctx.len(),
        })
    }
}

impl StepModel for BoundModel<'_> {
    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let len = self.fixed_len + prefix.len();
        if len > self.params.arch().context_window {
            return Err(Error::ContextOverflow {
                len,
                window: self.params.arch().context_window,
            });
        }
        if let Some(&id) = prefix.iter().find(|&&id| id as usize >= self.params.vocab_size()) {
            return Err(Error::InvalidTokenId {
                id,
                vocab_size: self.params.vocab_size(),
            });
        }
        let mut hidden = vec![0.0; self.params.arch().hidden_dim];
        let mut out = vec![0.0; self.params.vocab_size()];
        self.cond.step(prefix, &mut hidden, &mut out);
        Ok(out)
    }
}

type TableFn = Box<dyn Fn(&[TokenId]) -> Vec<f64> + Send + Sync>;

/// Deterministic logit tables keyed by prefix, for oracle tests and benches.
pub struct TableModel {
    vocab: usize,
    f: TableFn,
}

impl TableModel {
    /// `f` returns raw logits; they are log-normalized on the way out.
    pub fn from_fn(vocab: usize, f: impl Fn(&[TokenId]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        TableModel { vocab, f: Box::new(f) }
    }

    /// Pseudo-random logits in [-2, 2) derived from `(seed, prefix)`.
    pub fn random(vocab: usize, seed: u64) -> Self {
        Self::from_fn(vocab, move |prefix| {
            let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
            for &t in prefix {
                h = crate::seed::derive_seed(h, t as u64 + 1, prefix.len() as u64);
            }
            (0..vocab as u64)
                .map(|k| {
                    let x = crate::seed::derive_seed(h, 17, k);
                    (x >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
                })
                .collect()
        })
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = (self.f)(prefix);
        if out.len() != self.vocab {
            return Err(Error::VocabMismatch {
                left: self.vocab,
                right: out.len(),
            });
        }
        log_softmax_in_place(&mut out);
        Ok(out)
    }
}

/// What a reward token becomes when its text re-encodes to several target tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTokenRule {
    /// All probability goes to the first target token.
    #[default]
    First,
    /// Probability is split evenly over the target tokens.
    Split,
}

/// Precomputed reward-id to target-id transport table.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    targets: Vec<Vec<(TokenId, f64)>>,
    target_vocab: usize,
}

impl TokenMap {
    pub fn identity(vocab: usize) -> Self {
        TokenMap {
            targets: (0..vocab as TokenId).map(|i| vec![(i, 1.0)]).collect(),
            target_vocab: vocab,
        }
    }

    pub fn build(reward: &Tokenizer, target: &Tokenizer, rule: MultiTokenRule) -> Result<Self> {
        let targets = (0..reward.vocab_size() as TokenId)
            .map(|id| -> Result<Vec<(TokenId, f64)>> {
                if let Some(s) = Special::from_id(id) {
                    return Ok(vec![(s.id(), 1.0)]);
                }
                let ids = target.encode(reward.token_text(id)?);
                Ok(match rule {
                    MultiTokenRule::First => vec![(ids[0], 1.0)],
                    MultiTokenRule::Split => {
                        let w = 1.0 / ids.len() as f64;
                        ids.into_iter().map(|t| (t, w)).collect()
                    }
                })
            })
            .collect::<Result<_>>()?;
        Ok(TokenMap {
            targets,
            target_vocab: target.vocab_size(),
        })
    }

    pub fn source_vocab(&self) -> usize {
        self.targets.len()
    }

    pub fn target_vocab(&self) -> usize {
        self.target_vocab
    }

    pub fn targets_of(&self, reward_id: TokenId) -> &[(TokenId, f64)] {
        &self.targets[reward_id as usize]
    }
}

/// A reward distribution transported onto the target vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedLogits {
    /// Target ids that received reward mass, ascending.
    pub mapped: Vec<TokenId>,
    /// Reward probability of the top-k tokens that were transported.
    pub coverage: f64,
    /// Log-probability given to each unmapped target token before renormalization.
    pub floor: f64,
    /// Dense normalized log-distribution over the target vocabulary.
    pub logprobs: Vec<f64>,
}

impl MappedLogits {
    pub fn get(&self, id: TokenId) -> f64 {
        self.logprobs[id as usize]
    }
}

/// Top-k transport of `reward_logprobs` through `map`. Unmapped target tokens
/// get `min(ln(floor_eps / |V|), min_mapped - ln 2)`; the result is renormalized.
pub fn map_logits(reward_logprobs: &[f64], map: &TokenMap, k: usize, floor_eps: f64) -> Result<MappedLogits> {
    if k == 0 {
        return Err(Error::InvalidConfig("map_top_k must be at least 1".into()));
    }
    if reward_logprobs.len() != map.source_vocab() {
        return Err(Error::VocabMismatch {
            left: reward_logprobs.len(),
            right: map.source_vocab(),
        });
    }
    let v = map.target_vocab;
    let mut mass = vec![0.0; v];
    let mut hit = vec![false; v];
    let mut coverage = 0.0;
    for i in top_k_indices(reward_logprobs, k) {
        let p = reward_logprobs[i].exp();
        coverage += p;
        for &(t, w) in map.targets_of(i as TokenId) {
            mass[t as usize] += w * p;
            hit[t as usize] = true;
        }
    }
    let min_mapped = (0..v)
        .filter(|&t| hit[t])
        .map(|t| mass[t].ln())
        .fold(f64::INFINITY, f64::min);
    let floor = (floor_eps / v as f64).ln().min(min_mapped - std::f64::consts::LN_2);
    let mut logprobs: Vec<f64> = (0..v).map(|t| if hit[t] { mass[t].ln() } else { floor }).collect();
    log_softmax_in_place(&mut logprobs);
    Ok(MappedLogits {
        mapped: (0..v as TokenId).filter(|&t| hit[t as usize]).collect(),
        coverage: coverage.min(1.0),
        floor,
        logprobs,
    })
}

/// [`map_logits`] with a table built on the fly from two tokenizers.
pub fn map_logits_between(
    reward_logprobs: &[f64],
    reward: &Tokenizer,
    target: &Tokenizer,
    k: usize,
    floor_eps: f64,
) -> Result<MappedLogits> {
    let map = TokenMap::build(reward, target, MultiTokenRule::First)?;
    map_logits(reward_logprobs, &map, k, floor_eps)
}

/// `target + lambda * reward`, log-renormalized. `lambda = 0` returns the
/// target unchanged.
pub fn combine_logits(target: &[f64], reward: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_same(target, reward)?;
    if lambda == 0.0 {
        return Ok(target.to_vec());
    }
    let mut out: Vec<f64> = target.iter().zip(reward).map(|(t, r)| t + lambda * r).collect();
    log_softmax_in_place(&mut out);
    Ok(out)
}

/// `(1 - lambda) * reward + lambda * target`: the convex variant, kept for comparison.
pub fn combine_convex(target: &[f64], reward: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_same(target, reward)?;
    let mut out: Vec<f64> = target.iter().zip(reward).map(|(t, r)| (1.0 - lambda) * r + lambda * t).collect();
    log_softmax_in_place(&mut out);
    Ok(out)
}

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::VocabMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    /// `(1 + l) log p(y|q,I) - l log p(y|q,I_noised)`
    Vcd,
    /// `(1 - l) log p(y|q,I) + l log p(y|q)`
    M3id,
    /// `(1 - l) log p(y|q,c,I) + l log p(y|q,I)`
    Marine,
}

pub fn contrastive_combine(kind: ContrastKind, primary: &[f64], auxiliary: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_same(primary, auxiliary)?;
    if lambda == 0.0 {
        return Ok(primary.to_vec());
    }
    let (a, b) = match kind {
        ContrastKind::Vcd => (1.0 + lambda, -lambda),
        ContrastKind::M3id | ContrastKind::Marine => (1.0 - lambda, lambda),
    };
    let mut out: Vec<f64> = primary.iter().zip(auxiliary).map(|(p, x)| a * p + b * x).collect();
    log_softmax_in_place(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    /// Product of experts: `log p_target + lambda * log p_reward`.
    Guided,
    /// `(1 - lambda) log p_reward + lambda log p_target`.
    GuidedConvex,
    Base,
    Vcd,
    M3id,
    Marine,
}

impl Combinator {
    pub fn label(self) -> &'static str {
        match self {
            Combinator::Guided => "guided",
            Combinator::GuidedConvex => "guided_convex",
            Combinator::Base => "base",
            Combinator::Vcd => "vcd",
            Combinator::M3id => "m3id",
            Combinator::Marine => "marine",
        }
    }

    pub fn needs_reward(self) -> bool {
        matches!(self, Combinator::Guided | Combinator::GuidedConvex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub lambda: f64,
    pub map_top_k: usize,
    pub max_len: usize,
    pub combinator: Combinator,
    /// Total mass `eps` spread over unmapped tokens: floor = ln(eps / |V|).
    pub floor_eps: f64,
    /// Run the mapping path even when both models share a tokenizer.
    pub force_mapping: bool,
    pub multi_token: MultiTokenRule,
    pub trace: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            lambda: 0.6,
            map_top_k: 50,
            max_len: 40,
            combinator: Combinator::Guided,
            floor_eps: 1e-6,
            force_mapping: false,
            multi_token: MultiTokenRule::First,
            trace: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.map_top_k == 0 {
            return Err(Error::InvalidConfig("map_top_k must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be at least 1".into()));
        }
        if !(self.floor_eps > 0.0 && self.floor_eps < 1.0) {
            return Err(Error::InvalidConfig(format!("floor_eps must be in (0, 1), got {}", self.floor_eps)));
        }
        Ok(())
    }
}

/// Carries the target's prefix into the reward model's vocabulary and the
/// reward distribution back.
pub struct Bridge<'a> {
    /// `None` skips mapping: the reward distribution is used as-is.
    pub map: Option<TokenMap>,
    /// `(target, reward)` tokenizers; `None` means prefixes are shared verbatim.
    pub retokenize: Option<(&'a Tokenizer, &'a Tokenizer)>,
}

impl Bridge<'_> {
    pub fn passthrough() -> Bridge<'static> {
        Bridge {
            map: None,
            retokenize: None,
        }
    }

    fn reward_prefix(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        match self.retokenize {
            Some((target, reward)) => Ok(reward.encode(&target.decode(prefix)?)),
            None => Ok(prefix.to_vec()),
        }
    }

    fn transport(&self, reward_lp: Vec<f64>, cfg: &DecodeConfig) -> Result<Vec<f64>> {
        match &self.map {
            Some(map) => {
                let k = cfg.map_top_k.min(map.source_vocab());
                Ok(map_logits(&reward_lp, map, k, cfg.floor_eps)?.logprobs)
            }
            None => Ok(reward_lp),
        }
    }
}

/// Second distribution consulted at every step.
pub enum Guide<'a> {
    None,
    Reward { model: &'a dyn StepModel, bridge: &'a Bridge<'a> },
    Contrast { kind: ContrastKind, aux: &'a dyn StepModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub top5_target: Vec<(TokenId, f64)>,
    /// Mapped reward (or auxiliary) distribution on the target vocabulary.
    pub top5_mapped_reward: Vec<(TokenId, f64)>,
    pub chosen_id: TokenId,
    pub chosen_text: String,
    #[serde(rename = "λ")]
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Emitted ids, ending with EOS unless `max_len` was reached.
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub forwards: usize,
    pub trace: Vec<TraceStep>,
}

fn top5(xs: &[f64]) -> Vec<(TokenId, f64)> {
    top_k_indices(xs, 5).into_iter().map(|i| (i as TokenId, xs[i])).collect()
}

/// Greedy decoding loop shared by every combinator. Token text in the trace is
/// left empty; [`GuidedDecoder`] fills it in.
pub fn decode_with(primary: &dyn StepModel, guide: &Guide, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate()?;
    let mut y: Vec<TokenId> = Vec::new();
    let mut forwards = 0;
    let mut trace = Vec::new();
    while y.len() < cfg.max_len {
        let target = primary.next_logprobs(&y)?;
        forwards += 1;
        let (combined, second) = match guide {
            Guide::None => (target.clone(), None),
            Guide::Reward { model, bridge } => {
                let rlp = model.next_logprobs(&bridge.reward_prefix(&y)?)?;
                forwards += 1;
                let mapped = bridge.transport(rlp, cfg)?;
                let combined = match cfg.combinator {
                    Combinator::GuidedConvex => combine_convex(&target, &mapped, cfg.lambda)?,
                    _ => combine_logits(&target, &mapped, cfg.lambda)?,
                };
                (combined, Some(mapped))
            }
            Guide::Contrast { kind, aux } => {
                let alp = aux.next_logprobs(&y)?;
                forwards += 1;
                (contrastive_combine(*kind, &target, &alp, cfg.lambda)?, Some(alp))
            }
        };
        let next = argmax(&combined) as TokenId;
        if cfg.trace {
            trace.push(TraceStep {
                step: y.len(),
                top5_target: top5(&target),
                top5_mapped_reward: second.as_deref().map(top5).unwrap_or_default(),
                chosen_id: next,
                chosen_text: String::new(),
                lambda: cfg.lambda,
            });
        }
        y.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(DecodeOutput {
        tokens: y,
        text: String::new(),
        forwards,
        trace,
    })
}

/// `sum_t log p_target(y_t) + lambda * sum_t log p_mapped_reward(y_t)`. The
/// partition term is not computed, so scores only compare responses that share
/// the conditioning and `lambda`.
pub fn score_with(
    primary: &dyn StepModel,
    reward: &dyn StepModel,
    bridge: &Bridge,
    y: &[TokenId],
    lambda: f64,
    cfg: &DecodeConfig,
) -> Result<f64> {
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    for t in 0..y.len() {
        t_sum += primary.next_logprobs(&y[..t])?[y[t] as usize];
        if lambda != 0.0 {
            let rlp = reward.next_logprobs(&bridge.reward_prefix(&y[..t])?)?;
            r_sum += bridge.transport(rlp, cfg)?[y[t] as usize];
        }
    }
    Ok(t_sum + lambda * r_sum)
}

/// A model bound to the tokenizer its checkpoint was trained with.
#[derive(Clone, Copy)]
pub struct Expert<'a> {
    pub params: &'a ModelParams,
    pub tokenizer: &'a Tokenizer,
}

impl<'a> Expert<'a> {
    pub fn new(params: &'a ModelParams, tokenizer: &'a Tokenizer) -> Result<Self> {
        if params.tokenizer_id() != tokenizer.id() || params.vocab_size() != tokenizer.vocab_size() {
            return Err(Error::CheckpointMismatch(format!(
                "model bound to tokenizer {}, given {}",
                params.tokenizer_id(),
                tokenizer.id()
            )));
        }
        Ok(Expert { params, tokenizer })
    }
}

/// Text inputs for one decoding session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeInput {
    pub query: String,
    pub observation: String,
    /// Degraded view for VCD.
    pub noised_observation: Option<String>,
    /// Guidance view for MARINE.
    pub guidance_observation: Option<String>,
}

impl DecodeInput {
    pub fn new(query: &str, observation: &str) -> Self {
        DecodeInput {
            query: query.into(),
            observation: observation.into(),
            noised_observation: None,
            guidance_observation: None,
        }
    }

    /// Plain view plus the auxiliary views the contrastive baselines need.
    pub fn for_scene(scene: &Scene, query: &str, render: &RenderConfig, seed: u64) -> Result<Self> {
        let noised = augment(scene, &AugmentKind::noise_strong(), seed, render)?;
        let guidance = augment(scene, &AugmentKind::contrast(), seed, render)?;
        Ok(DecodeInput {
            query: query.into(),
            observation: render_view(scene, render).text(),
            noised_observation: Some(noised.text()),
            guidance_observation: Some(guidance.text()),
        })
    }
}

pub struct GuidedDecoder<'a> {
    target: Expert<'a>,
    reward: Option<Expert<'a>>,
    bridge: Bridge<'a>,
    cfg: DecodeConfig,
}

impl<'a> GuidedDecoder<'a> {
    pub fn new(target: Expert<'a>, reward: Option<Expert<'a>>, cfg: DecodeConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.combinator.needs_reward() && reward.is_none() {
            return Err(Error::InvalidConfig(format!(
                "combinator {} needs a reward model",
                cfg.combinator.label()
            )));
        }
        let bridge = match reward {
            Some(r) if r.tokenizer.id() != target.tokenizer.id() => Bridge {
                map: Some(TokenMap::build(r.tokenizer, target.tokenizer, cfg.multi_token)?),
                retokenize: Some((target.tokenizer, r.tokenizer)),
            },
            Some(r) if cfg.force_mapping => Bridge {
                map: Some(TokenMap::build(r.tokenizer, target.tokenizer, cfg.multi_token)?),
                retokenize: None,
            },
            _ => Bridge::passthrough(),
        };
        Ok(GuidedDecoder {
            target,
            reward,
            bridge,
            cfg,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.cfg
    }

    /// True when reward distributions go through the top-k transport.
    pub fn maps_logits(&self) -> bool {
        self.bridge.map.is_some()
    }

    pub fn target(&self) -> Expert<'a> {
        self.target
    }

    pub fn decode(&self, input: &DecodeInput) -> Result<DecodeOutput> {
        let tt = self.target.tokenizer;
        let tq = tt.encode(&input.query);
        let mut out = match self.cfg.combinator {
            Combinator::Base => {
                let primary = BoundModel::new(self.target.params, &tq, &tt.encode(&input.observation))?;
                decode_with(&primary, &Guide::None, &self.cfg)?
            }
            Combinator::Guided | Combinator::GuidedConvex => {
                let primary = BoundModel::new(self.target.params, &tq, &tt.encode(&input.observation))?;
                let r = self.reward.expect("checked in new");
                let rm = BoundModel::new(
                    r.params,
                    &r.tokenizer.encode(&input.query),
                    &r.tokenizer.encode(&input.observation),
                )?;
                let guide = Guide::Reward {
                    model: &rm,
                    bridge: &self.bridge,
                };
                decode_with(&primary, &guide, &self.cfg)?
            }
            Combinator::Vcd | Combinator::M3id => {
                let primary = BoundModel::new(self.target.params, &tq, &tt.encode(&input.observation))?;
                let (kind, aux_obs) = if self.cfg.combinator == Combinator::Vcd {
                    let noised = input
                        .noised_observation
                        .as_deref()
                        .ok_or_else(|| Error::InvalidInput("vcd needs a noised observation".into()))?;
                    (ContrastKind::Vcd, tt.encode(noised))
                } else {
                    (ContrastKind::M3id, Vec::new())
                };
                let aux = BoundModel::new(self.target.params, &tq, &aux_obs)?;
                decode_with(&primary, &Guide::Contrast { kind, aux: &aux }, &self.cfg)?
            }
            Combinator::Marine => {
                let guided = input
                    .guidance_observation
                    .as_deref()
                    .ok_or_else(|| Error::InvalidInput("marine needs a guidance observation".into()))?;
                let primary = BoundModel::new(self.target.params, &tq, &tt.encode(guided))?;
                let aux = BoundModel::new(self.target.params, &tq, &tt.encode(&input.observation))?;
                let guide = Guide::Contrast {
                    kind: ContrastKind::Marine,
                    aux: &aux,
                };
                decode_with(&primary, &guide, &self.cfg)?
            }
        };
        out.text = tt.decode(&out.tokens)?;
        for step in &mut out.trace {
            step.chosen_text = tt.token_text(step.chosen_id)?.to_string();
        }
        Ok(out)
    }

    /// Sequence score of `y` (target ids, ending with EOS) under the product of experts.
    pub fn seq_score(&self, input: &DecodeInput, y: &[TokenId], lambda: f64) -> Result<f64> {
        let tt = self.target.tokenizer;
        let primary = BoundModel::new(self.target.params, &tt.encode(&input.query), &tt.encode(&input.observation))?;
        let r = self
            .reward
            .ok_or_else(|| Error::InvalidConfig("seq_score needs a reward model".into()))?;
        let rm = BoundModel::new(
            r.params,
            &r.tokenizer.encode(&input.query),
            &r.tokenizer.encode(&input.observation),
        )?;
        score_with(&primary, &rm, &self.bridge, y, lambda, &self.cfg)
    }

    /// Samples `k` full target responses and keeps the best by [`GuidedDecoder::seq_score`].
    pub fn rerank(&self, input: &DecodeInput, k: usize, seed: u64) -> Result<RerankOutput> {
        if k == 0 {
            return Err(Error::InvalidK("rerank needs at least one candidate".into()));
        }
        let tt = self.target.tokenizer;
        let (tq, to) = (tt.encode(&input.query), tt.encode(&input.observation));
        let mut forwards = 0;
        let mut best: Option<(f64, Vec<TokenId>)> = None;
        let mut lengths = Vec::with_capacity(k);
        for i in 0..k {
            let policy = crate::model::SamplePolicy::Temperature {
                tau: 1.0,
                seed: crate::seed::derive_seed(seed, 31, i as u64),
            };
            let y = self.target.params.sample_response(&tq, &to, policy, self.cfg.max_len)?;
            forwards += y.len();
            let score = self.seq_score(input, &y, self.cfg.lambda)?;
            forwards += 2 * y.len();
            lengths.push(y.len());
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, y));
            }
        }
        let (score, tokens) = best.expect("k >= 1");
        Ok(RerankOutput {
            text: tt.decode(&tokens)?,
            tokens,
            score,
            forwards,
            candidate_lengths: lengths,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankOutput {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub score: f64,
    pub forwards: usize,
    pub candidate_lengths: Vec<usize>,
}

/// One-shot convenience wrapper around [`GuidedDecoder`].
pub fn guided_decode(
    target: Expert,
    reward: Option<Expert>,
    input: &DecodeInput,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    GuidedDecoder::new(target, reward, *cfg)?.decode(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_token_secs: f64,
    pub std_token_secs: f64,
    pub mean_response_secs: f64,
    pub forwards_per_token: f64,
    pub responses: usize,
}

impl TimingStats {
    /// Per-token wall-time ratio `self / base`.
    pub fn ratio_to(&self, base: &TimingStats) -> f64 {
        self.mean_token_secs / base.mean_token_secs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub base: TimingStats,
    pub guided: TimingStats,
    pub ratio: f64,
}

fn time_decoder(dec: &GuidedDecoder, workload: &[DecodeInput]) -> Result<TimingStats> {
    let mut per_token = Vec::with_capacity(workload.len());
    let mut per_response = Vec::with_capacity(workload.len());
    let (mut forwards, mut tokens) = (0usize, 0usize);
    for input in workload {
        let start = Instant::now();
        let out = dec.decode(input)?;
        let secs = start.elapsed().as_secs_f64();
        per_response.push(secs);
        per_token.push(secs / out.tokens.len() as f64);
        forwards += out.forwards;
        tokens += out.tokens.len();
    }
    let n = per_token.len() as f64;
    let mean = per_token.iter().sum::<f64>() / n;
    let var = per_token.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(TimingStats {
        mean_token_secs: mean,
        std_token_secs: var.sqrt(),
        mean_response_secs: per_response.iter().sum::<f64>() / n,
        forwards_per_token: forwards as f64 / tokens as f64,
        responses: workload.len(),
    })
}

/// Wall time of base greedy decoding against guided decoding on the same
/// workload, after one warm-up pass.
pub fn latency_profile(target: Expert, reward: Expert, cfg: &DecodeConfig, workload: &[DecodeInput]) -> Result<LatencyReport> {
    if workload.is_empty() {
        return Err(Error::InvalidInput("empty latency workload".into()));
    }
    let base = GuidedDecoder::new(
        target,
        None,
        DecodeConfig {
            combinator: Combinator::Base,
            trace: false,
            ..*cfg
        },
    )?;
    let guided = GuidedDecoder::new(
        target,
        Some(reward),
        DecodeConfig {
            combinator: Combinator::Guided,
            trace: false,
            ..*cfg
        },
    )?;
    let warm = &workload[..workload.len().min(8)];
    time_decoder(&base, warm)?;
    time_decoder(&guided, warm)?;
    let b = time_decoder(&base, workload)?;
    let g = time_decoder(&guided, workload)?;
    Ok(LatencyReport {
        base: b,
        guided: g,
        ratio: g.ratio_to(&b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathutil::logsumexp;
    use crate::model::{ArchConfig, SamplePolicy};
    use proptest::prelude::*;

    fn ln(xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn combine_examples() {
        let t = ln(&[0.5, 0.3, 0.2]);
        let r = ln(&[0.2, 0.3, 0.5]);
        assert_eq!(combine_logits(&t, &r, 0.0).unwrap(), t);
        let uni = ln(&[1.0 / 3.0; 3]);
        for (a, b) in combine_logits(&t, &uni, 0.9).unwrap().iter().zip(&t) {
            assert!((a - b).abs() < 1e-12);
        }
        // brute force p_t * p_r^0.6 over three outcomes
        let scores: Vec<f64> = [0.5f64, 0.3, 0.2]
            .iter()
            .zip([0.2f64, 0.3, 0.5])
            .map(|(a, b)| a * b.powf(0.6))
            .collect();
        let combined = combine_logits(&t, &r, 0.6).unwrap();
        assert_eq!(argmax(&combined), argmax(&scores));
        let total: f64 = scores.iter().sum();
        for (c, s) in combined.iter().zip(&scores) {
            assert!((c.exp() - s / total).abs() < 1e-12);
        }
        assert!(combine_logits(&t, &r[..2], 0.5).is_err());
    }

    #[test]
    fn contrastive_fixed_points() {
        let p = ln(&[0.6, 0.3, 0.1]);
        let a = ln(&[0.2, 0.5, 0.3]);
        for kind in [ContrastKind::Vcd, ContrastKind::M3id, ContrastKind::Marine] {
            assert_eq!(contrastive_combine(kind, &p, &a, 0.0).unwrap(), p);
        }
        for (x, y) in contrastive_combine(ContrastKind::Vcd, &p, &p, 0.7).unwrap().iter().zip(&p) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in contrastive_combine(ContrastKind::M3id, &p, &a, 1.0).unwrap().iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            contrastive_combine(ContrastKind::Vcd, &p, &a[..1], 0.5),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn identity_map_with_full_k_is_exact() {
        let lp = ln(&[0.1, 0.2, 0.3, 0.4]);
        let m = map_logits(&lp, &TokenMap::identity(4), 4, 1e-6).unwrap();
        assert_eq!(m.mapped, vec![0, 1, 2, 3]);
        assert!((m.coverage - 1.0).abs() < 1e-12);
        for (a, b) in m.logprobs.iter().zip(&lp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k_one_has_single_entry() {
        let lp = ln(&[0.1, 0.2, 0.3, 0.4]);
        let m = map_logits(&lp, &TokenMap::identity(4), 1, 1e-6).unwrap();
        assert_eq!(m.mapped, vec![3]);
        assert!((m.coverage - 0.4).abs() < 1e-12);
        assert!(m.floor < 0.4f64.ln());
        assert!(map_logits(&lp, &TokenMap::identity(4), 0, 1e-6).is_err());
    }

    #[test]
    fn first_token_rule_on_merged_pair() {
        let reward = Tokenizer::merged_with_alphabet("ab ".chars(), &["ab ab ab".to_string()], 1).unwrap();
        let target = Tokenizer::char_level("ab ".chars()).unwrap();
        let ab = reward.vocab().id("ab").expect("merge learned");
        let mut p = vec![0.4 / (reward.vocab_size() - 1) as f64; reward.vocab_size()];
        p[ab as usize] = 0.6;
        let m = map_logits_between(&ln(&p), &reward, &target, 1, 1e-6).unwrap();
        let a = target.vocab().id("a").unwrap();
        assert_eq!(m.mapped, vec![a]);
        assert!((m.coverage - 0.6).abs() < 1e-12);
        // renormalized against a floor of ln(1e-6/|V|) per unmapped token
        let unmapped = (target.vocab_size() - 1) as f64;
        let z = 0.6 + unmapped * (1e-6 / target.vocab_size() as f64);
        assert!((m.get(a) - (0.6f64 / z).ln()).abs() < 1e-12);

        let split = TokenMap::build(&reward, &target, MultiTokenRule::Split).unwrap();
        assert_eq!(split.targets_of(ab).len(), 2);
    }

    #[test]
    fn specials_map_by_role() {
        let reward = Tokenizer::char_level("ab".chars()).unwrap();
        let target = Tokenizer::char_level("ba".chars()).unwrap();
        let map = TokenMap::build(&reward, &target, MultiTokenRule::First).unwrap();
        for s in Special::ALL {
            assert_eq!(map.targets_of(s.id()), &[(s.id(), 1.0)]);
        }
        let a_r = reward.vocab().id("a").unwrap();
        assert_eq!(map.targets_of(a_r)[0].0, target.vocab().id("a").unwrap());
    }

    proptest! {
        #[test]
        fn coverage_never_exceeds_one(logits in prop::collection::vec(-8.0f64..8.0, 2..40), k in 1usize..50) {
            let lp = crate::mathutil::log_softmax(&logits);
            let v = lp.len();
            let m = map_logits(&lp, &TokenMap::identity(v), k, 1e-6).unwrap();
            prop_assert!(m.coverage > 0.0 && m.coverage <= 1.0);
            prop_assert!(logsumexp(&m.logprobs).abs() <= 1e-9);
            prop_assert_eq!(m.mapped.len(), k.min(v));
        }

        #[test]
        fn combined_is_normalized(a in prop::collection::vec(-8.0f64..8.0, 5), b in prop::collection::vec(-8.0f64..8.0, 5), lambda in 0.0f64..3.0) {
            let t = crate::mathutil::log_softmax(&a);
            let r = crate::mathutil::log_softmax(&b);
            prop_assert!(logsumexp(&combine_logits(&t, &r, lambda).unwrap()).abs() <= 1e-9);
            for kind in [ContrastKind::Vcd, ContrastKind::M3id, ContrastKind::Marine] {
                prop_assert!(logsumexp(&contrastive_combine(kind, &t, &r, lambda).unwrap()).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn reward_flips_hallucinated_choice() {
        // ids: 0 BOS, 1 EOS, 2 grounded, 3 hallucinated
        let target = TableModel::from_fn(4, |prefix| match prefix.len() {
            0 => vec![-9.0, -9.0, 0.0, 0.1],
            _ => vec![-9.0, 5.0, -9.0, -9.0],
        });
        let reward = TableModel::from_fn(4, |prefix| match prefix.len() {
            0 => vec![(0.02f64).ln(), (0.03f64).ln(), (0.9f64).ln(), (0.05f64).ln()],
            _ => vec![-9.0, 5.0, -9.0, -9.0],
        });
        let bridge = Bridge::passthrough();
        let guide = Guide::Reward {
            model: &reward,
            bridge: &bridge,
        };
        let base = decode_with(&target, &Guide::None, &DecodeConfig::default()).unwrap();
        assert_eq!(base.tokens, vec![3, EOS]);
        let cfg = DecodeConfig {
            lambda: 1.0,
            ..DecodeConfig::default()
        };
        let out = decode_with(&target, &guide, &cfg).unwrap();
        assert_eq!(out.tokens, vec![2, EOS]);
        assert_eq!(out.forwards, 4);
    }

    fn brute_force_greedy(target: &TableModel, reward: &TableModel, lambda: f64, max_len: usize) -> Vec<TokenId> {
        let mut y = Vec::new();
        while y.len() < max_len {
            let t = target.next_logprobs(&y).unwrap();
            let r = reward.next_logprobs(&y).unwrap();
            let p: Vec<f64> = t.iter().zip(&r).map(|(a, b)| a.exp() * b.exp().powf(lambda)).collect();
            let next = argmax(&p) as TokenId;
            y.push(next);
            if next == EOS {
                break;
            }
        }
        y
    }

    #[test]
    fn matches_brute_force_on_small_tables() {
        for seed in 0..50 {
            let target = TableModel::random(4, seed);
            let reward = TableModel::random(4, seed + 1000);
            for lambda in [0.0, 0.3, 0.6, 1.0] {
                let cfg = DecodeConfig {
                    lambda,
                    max_len: 4,
                    map_top_k: 4,
                    ..DecodeConfig::default()
                };
                let expected = brute_force_greedy(&target, &reward, lambda, 4);
                let plain = Bridge::passthrough();
                let mapped = Bridge {
                    map: Some(TokenMap::identity(4)),
                    retokenize: None,
                };
                for bridge in [&plain, &mapped] {
                    let guide = Guide::Reward { model: &reward, bridge };
                    assert_eq!(decode_with(&target, &guide, &cfg).unwrap().tokens, expected);
                }
            }
        }
    }

    #[test]
    fn scores_match_stepwise_product_form() {
        // |V| = 2 with EOS = 1; enumerate every sequence up to length 3
        let target = TableModel::random(2, 7);
        let reward = TableModel::random(2, 8);
        let bridge = Bridge::passthrough();
        let cfg = DecodeConfig::default();
        let mut seqs: Vec<Vec<TokenId>> = Vec::new();
        for len in 1..=3usize {
            for bits in 0..(1u32 << len) {
                let y: Vec<TokenId> = (0..len).map(|i| (bits >> i) & 1).collect();
                if y[..len - 1].contains(&EOS) {
                    continue;
                }
                seqs.push(y);
            }
        }
        for lambda in [0.0, 0.4, 1.3] {
            for y in &seqs {
                let s = score_with(&target, &reward, &bridge, y, lambda, &cfg).unwrap();
                let mut prod = 0.0;
                for t in 0..y.len() {
                    let a = target.next_logprobs(&y[..t]).unwrap();
                    let b = reward.next_logprobs(&y[..t]).unwrap();
                    let raw: Vec<f64> = a.iter().zip(&b).map(|(x, r)| x + lambda * r).collect();
                    let c = combine_logits(&a, &b, lambda).unwrap();
                    prod += c[y[t] as usize] + logsumexp(&raw);
                }
                assert!((s - prod).abs() < 1e-12);
            }
        }
        let y = &seqs[3];
        let s = |l| score_with(&target, &reward, &bridge, y, l, &cfg).unwrap();
        assert!((s(0.3) + s(0.5) - s(0.0) - s(0.8)).abs() < 1e-12);
    }

    fn models() -> (Tokenizer, Tokenizer, ModelParams, ModelParams) {
        let corpus = vec!["describe the scene. red table chair lamp bed".to_string(); 3];
        let tt = Tokenizer::merged(&corpus, 20).unwrap();
        let rt = Tokenizer::merged(&corpus, 12).unwrap();
        let arch = ArchConfig {
            embed_dim: 6,
            hidden_dim: 8,
            recent: 2,
            context_window: 128,
        };
        let tp = ModelParams::init(1, arch, &tt).unwrap();
        let rp = ModelParams::init(2, arch, &rt).unwrap();
        (tt, rt, tp, rp)
    }

    #[test]
    fn zero_lambda_matches_base_greedy_across_tokenizers() {
        let (tt, rt, tp, rp) = models();
        let cfg = DecodeConfig {
            lambda: 0.0,
            max_len: 12,
            trace: true,
            ..DecodeConfig::default()
        };
        let dec = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), Some(Expert::new(&rp, &rt).unwrap()), cfg).unwrap();
        assert!(dec.maps_logits());
        let input = DecodeInput::new("describe the scene.", "lo red table");
        let out = dec.decode(&input).unwrap();
        let base = tp
            .sample_response(&tt.encode(&input.query), &tt.encode(&input.observation), SamplePolicy::Greedy, 12)
            .unwrap();
        assert_eq!(out.tokens, base);
        assert_eq!(out.forwards, 2 * out.tokens.len());
        assert_eq!(out.trace.len(), out.tokens.len());
        assert_eq!(out.text, tt.decode(&base).unwrap());
    }

    #[test]
    fn forced_mapping_matches_skip_branch() {
        let (tt, _, tp, _) = models();
        let rp = ModelParams::init(9, *tp.arch(), &tt).unwrap();
        let input = DecodeInput::new("describe the scene.", "lo red table");
        let v = tt.vocab_size();
        let skip = DecodeConfig {
            lambda: 0.8,
            map_top_k: v,
            max_len: 10,
            ..DecodeConfig::default()
        };
        let forced = DecodeConfig {
            force_mapping: true,
            ..skip
        };
        let a = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), Some(Expert::new(&rp, &tt).unwrap()), skip).unwrap();
        let b = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), Some(Expert::new(&rp, &tt).unwrap()), forced).unwrap();
        assert!(!a.maps_logits() && b.maps_logits());
        assert_eq!(a.decode(&input).unwrap().tokens, b.decode(&input).unwrap().tokens);
    }

    #[test]
    fn seq_score_at_zero_lambda_is_target_logprob() {
        let (tt, rt, tp, rp) = models();
        let dec = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), Some(Expert::new(&rp, &rt).unwrap()), DecodeConfig::default()).unwrap();
        let input = DecodeInput::new("describe the scene.", "lo red table");
        let y = [tt.encode(" table"), vec![EOS]].concat();
        let s = dec.seq_score(&input, &y, 0.0).unwrap();
        let lp = tp.seq_logprob(&tt.encode(&input.query), &tt.encode(&input.observation), &y).unwrap();
        assert_eq!(s, lp);
    }

    #[test]
    fn rerank_costs_more_forwards() {
        let (tt, rt, tp, rp) = models();
        let cfg = DecodeConfig {
            max_len: 8,
            ..DecodeConfig::default()
        };
        let dec = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), Some(Expert::new(&rp, &rt).unwrap()), cfg).unwrap();
        let input = DecodeInput::new("describe the scene.", "lo red table");
        let guided = dec.decode(&input).unwrap();
        let rr = dec.rerank(&input, 5, 3).unwrap();
        let cand_tokens: usize = rr.candidate_lengths.iter().sum();
        assert_eq!(rr.forwards, 3 * cand_tokens);
        let per_token_guided = guided.forwards as f64 / guided.tokens.len() as f64;
        let per_output_token = rr.forwards as f64 / (cand_tokens as f64 / 5.0);
        assert!(per_output_token >= 5.0 * per_token_guided);
    }

    #[test]
    fn mismatched_expert_rejected() {
        let (tt, rt, tp, _) = models();
        assert!(Expert::new(&tp, &rt).is_err());
        assert!(Expert::new(&tp, &tt).is_ok());
        let no_reward = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), None, DecodeConfig::default());
        assert!(no_reward.is_err());
    }

    #[test]
    fn contrastive_decoders_run() {
        let (tt, _, tp, _) = models();
        let scene = crate::scenegen::sample_scene(4, &crate::scenegen::SceneConfig::default()).unwrap();
        let input = DecodeInput::for_scene(&scene, "describe the scene.", &RenderConfig::default(), 1).unwrap();
        for c in [Combinator::Vcd, Combinator::M3id, Combinator::Marine, Combinator::Base] {
            let cfg = DecodeConfig {
                combinator: c,
                max_len: 6,
                ..DecodeConfig::default()
            };
            let dec = GuidedDecoder::new(Expert::new(&tp, &tt).unwrap(), None, cfg).unwrap();
            let out = dec.decode(&input).unwrap();
            let per = if c == Combinator::Base { 1 } else { 2 };
            assert_eq!(out.forwards, per * out.tokens.len());
        }
    }

    #[test]
    fn timing_ratio_to_self_is_one() {
        let s = TimingStats {
            mean_token_secs: 2e-5,
            std_token_secs: 1e-6,
            mean_response_secs: 1e-4,
            forwards_per_token: 1.0,
            responses: 100,
        };
        assert_eq!(s.ratio_to(&s), 1.0);
    }
}
