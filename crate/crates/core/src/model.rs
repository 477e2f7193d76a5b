// SPDX-License-Identifier: Apache-2.0

//! A tiny autoregressive conditional language model with exact log-probabilities
//! and hand-derived gradients.
//!
//! Architecture, for a context `(query, observation, prefix)`:
//!
//! ```text
//! q = mean(E[query])      o = mean(E[observation])      p = mean(E[prefix])
//! r_j = E[prefix[-1-j]]   (BOS embedding when the prefix is shorter than j+1)
//! a = tanh(Wq q + Wo o + Wp p + sum_j Wr_j r_j + b)
//! log pi(. | ctx) = log_softmax(U a + c)
//! ```
//!
//! The same architecture serves as the frozen target model and as the reward
//! model; each instance is bound to one tokenizer through `tokenizer_id`.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathutil::{argmax, log_softmax_in_place};
use crate::optim::{Optimizer, OptimizerState};
use crate::seed::rng;
use crate::tokenization::{TokenId, Tokenizer, BOS, EOS};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed examples per gradient chunk; chunk sums are reduced in index order so
/// results do not depend on the thread count.
pub(crate) const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of most recent prefix tokens that get their own mixing matrix.
    pub recent: usize,
    pub context_window: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 24,
            hidden_dim: 64,
            recent: 3,
            context_window: 256,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context_window < 4 {
            return Err(Error::InvalidConfig(format!(
                "need embed_dim >= 1, hidden_dim >= 1, context_window >= 4; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count for a vocabulary of `v` tokens.
    pub fn param_count(&self, v: usize) -> usize {
        let (d, h) = (self.embed_dim, self.hidden_dim);
        v * d + (3 + self.recent) * h * d + h + v * h + v
    }
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    d: usize,
    h: usize,
    recent: usize,
    emb: usize,
    w_query: usize,
    w_obs: usize,
    w_hist: usize,
    w_recent: usize,
    b_hidden: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &ArchConfig, v: usize) -> Self {
        let (d, h) = (arch.embed_dim, arch.hidden_dim);
        let emb = 0;
        let w_query = emb + v * d;
        let w_obs = w_query + h * d;
        let w_hist = w_obs + h * d;
        let w_recent = w_hist + h * d;
        let b_hidden = w_recent + arch.recent * h * d;
        let w_out = b_hidden + h;
        let b_out = w_out + v * h;
        let total = b_out + v;
        Layout {
            v,
            d,
            h,
            recent: arch.recent,
            emb,
            w_query,
            w_obs,
            w_hist,
            w_recent,
            b_hidden,
            w_out,
            b_out,
            total,
        }
    }
}

/// Parameters of one model instance. Only [`train_mle`] and the reward
/// trainer produce new values; everything else borrows immutably.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchConfig,
    vocab_size: usize,
    tokenizer_id: String,
    data: Vec<f64>,
}

/// The conditioning tuple, already tokenized with the model's tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContextEncoding {
    pub query: Vec<TokenId>,
    pub observation: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
}

impl ContextEncoding {
    /// `[BOS, query.., SEP, observation.., SEP, prefix..]`, with PAD as SEP.
    pub fn flatten(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.len());
        v.push(BOS);
        v.extend_from_slice(&self.query);
        v.push(crate::tokenization::PAD);
        v.extend_from_slice(&self.observation);
        v.push(crate::tokenization::PAD);
        v.extend_from_slice(&self.prefix);
        v
    }

    pub fn len(&self) -> usize {
        3 + self.query.len() + self.observation.len() + self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One supervised example: the response should end with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub query: Vec<TokenId>,
    pub observation: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl ModelParams {
    pub fn init(seed: u64, arch: ArchConfig, tokenizer: &Tokenizer) -> Result<Self> {
        Self::init_raw(seed, arch, tokenizer.vocab_size(), tokenizer.id())
    }

    /// Uniform in `[-1/sqrt(d), 1/sqrt(d)]` for weights, zero biases.
    pub fn init_raw(seed: u64, arch: ArchConfig, vocab_size: usize, tokenizer_id: &str) -> Result<Self> {
        arch.validate()?;
        if vocab_size < 5 {
            return Err(Error::InvalidConfig(format!("vocabulary of {vocab_size} tokens is too small")));
        }
        let layout = Layout::new(&arch, vocab_size);
        let scale = 1.0 / (arch.embed_dim as f64).sqrt();
        let mut r = rng(seed);
        let mut data: Vec<f64> = (0..layout.total).map(|_| r.gen_range(-scale..=scale)).collect();
        data[layout.b_hidden..layout.b_hidden + layout.h].fill(0.0);
        data[layout.b_out..].fill(0.0);
        Ok(ModelParams {
            arch,
            vocab_size,
            tokenizer_id: tokenizer_id.to_string(),
            data,
        })
    }

    pub fn zeros(arch: ArchConfig, tokenizer: &Tokenizer) -> Result<Self> {
        let mut p = Self::init(0, arch, tokenizer)?;
        p.data.fill(0.0);
        Ok(p)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokenizer_id(&self) -> &str {
        &self.tokenizer_id
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch, self.vocab_size)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(&id) => Err(Error::InvalidTokenId {
                id,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_window(&self, len: usize) -> Result<()> {
        if len > self.arch.context_window {
            Err(Error::ContextOverflow {
                len,
                window: self.arch.context_window,
            })
        } else {
            Ok(())
        }
    }

    pub(crate) fn check_context(&self, ctx: &ContextEncoding) -> Result<()> {
        self.check_window(ctx.len())?;
        self.check_ids(&ctx.query)?;
        self.check_ids(&ctx.observation)?;
        self.check_ids(&ctx.prefix)
    }

    /// Next-token log-distribution over the whole vocabulary.
    pub fn forward_logprobs(&self, ctx: &ContextEncoding) -> Result<Vec<f64>> {
        self.check_context(ctx)?;
        let base = Conditioned::new(self, &ctx.query, &ctx.observation);
        let mut out = vec![0.0; self.vocab_size];
        let mut hidden = vec![0.0; self.arch.hidden_dim];
        base.step(&ctx.prefix, &mut hidden, &mut out);
        Ok(out)
    }

    fn check_sequence(&self, query: &[TokenId], obs: &[TokenId], y: &[TokenId]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::InvalidInput("response is empty".into()));
        }
        if *y.last().unwrap() != EOS {
            return Err(Error::InvalidInput("response must end with EOS".into()));
        }
        self.check_ids(query)?;
        self.check_ids(obs)?;
        self.check_ids(y)?;
        self.check_window(3 + query.len() + obs.len() + y.len() - 1)
    }

    /// `sum_t log pi(y_t | query, obs, y_<t)`.
    pub fn seq_logprob(&self, query: &[TokenId], obs: &[TokenId], y: &[TokenId]) -> Result<f64> {
        self.check_sequence(query, obs, y)?;
        Ok(self.seq_logprob_unchecked(query, obs, y))
    }

    pub(crate) fn seq_logprob_unchecked(&self, query: &[TokenId], obs: &[TokenId], y: &[TokenId]) -> f64 {
        let base = Conditioned::new(self, query, obs);
        let mut out = vec![0.0; self.vocab_size];
        let mut hidden = vec![0.0; self.arch.hidden_dim];
        let mut total = 0.0;
        for t in 0..y.len() {
            base.step(&y[..t], &mut hidden, &mut out);
            total += out[y[t] as usize];
        }
        total
    }

    /// Value and gradient of [`ModelParams::seq_logprob`] with respect to every parameter.
    pub fn grad_seq_logprob(&self, query: &[TokenId], obs: &[TokenId], y: &[TokenId]) -> Result<(f64, Vec<f64>)> {
        self.check_sequence(query, obs, y)?;
        let mut grad = vec![0.0; self.data.len()];
        let lp = self.accumulate_seq_grad(query, obs, y, 1.0, &mut grad);
        Ok((lp, grad))
    }

    /// Adds `scale * d seq_logprob / d params` into `grad` and returns the log-probability.
    pub(crate) fn accumulate_seq_grad(
        &self,
        query: &[TokenId],
        obs: &[TokenId],
        y: &[TokenId],
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let l = self.layout();
        let (d, h, v) = (l.d, l.h, l.v);
        let w = &self.data;
        let base = Conditioned::new(self, query, obs);
        let mut out = vec![0.0; v];
        let mut hidden = vec![0.0; h];
        let mut dz_sum = vec![0.0; h];
        let mut dz = vec![0.0; h];
        let mut total = 0.0;

        for t in 0..y.len() {
            let prefix = &y[..t];
            base.step(prefix, &mut hidden, &mut out);
            let target = y[t] as usize;
            total += out[target];

            // d log p[target] / d logits = onehot - softmax
            dz.fill(0.0);
            for k in 0..v {
                let g = scale * ((k == target) as u8 as f64 - out[k].exp());
                if g == 0.0 {
                    continue;
                }
                grad[l.b_out + k] += g;
                let row = l.w_out + k * h;
                for j in 0..h {
                    grad[row + j] += g * hidden[j];
                    dz[j] += g * w[row + j];
                }
            }
            for j in 0..h {
                dz[j] *= 1.0 - hidden[j] * hidden[j];
                dz_sum[j] += dz[j];
                grad[l.b_hidden + j] += dz[j];
            }

            // prefix mean
            if !prefix.is_empty() {
                let inv = 1.0 / prefix.len() as f64;
                let mut mean = vec![0.0; d];
                for &tok in prefix {
                    let e = l.emb + tok as usize * d;
                    for i in 0..d {
                        mean[i] += w[e + i] * inv;
                    }
                }
                let mut back = vec![0.0; d];
                for j in 0..h {
                    let row = l.w_hist + j * d;
                    for i in 0..d {
                        grad[row + i] += dz[j] * mean[i];
                        back[i] += dz[j] * w[row + i];
                    }
                }
                for &tok in prefix {
                    let e = l.emb + tok as usize * d;
                    for i in 0..d {
                        grad[e + i] += back[i] * inv;
                    }
                }
            }
            // recent positions
            for r in 0..l.recent {
                let tok = recent_token(prefix, r) as usize;
                let e = l.emb + tok * d;
                let mat = l.w_recent + r * h * d;
                for j in 0..h {
                    let row = mat + j * d;
                    for i in 0..d {
                        grad[row + i] += dz[j] * w[e + i];
                        grad[e + i] += dz[j] * w[row + i];
                    }
                }
            }
        }

        // Query and observation poolings are shared by every step.
        for (section, mat) in [(query, l.w_query), (obs, l.w_obs)] {
            if section.is_empty() {
                continue;
            }
            let inv = 1.0 / section.len() as f64;
            let pooled = pool(w, l, section);
            let mut back = vec![0.0; d];
            for j in 0..h {
                let row = mat + j * d;
                for i in 0..d {
                    grad[row + i] += dz_sum[j] * pooled[i];
                    back[i] += dz_sum[j] * w[row + i];
                }
            }
            for &tok in section {
                let e = l.emb + tok as usize * d;
                for i in 0..d {
                    grad[e + i] += back[i] * inv;
                }
            }
        }
        total
    }

    pub fn sample_response(
        &self,
        query: &[TokenId],
        obs: &[TokenId],
        policy: SamplePolicy,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return Err(Error::InvalidInput("max_len must be at least 1".into()));
        }
        self.check_ids(query)?;
        self.check_ids(obs)?;
        self.check_window(3 + query.len() + obs.len() + max_len - 1)?;
        let base = Conditioned::new(self, query, obs);
        let mut out = vec![0.0; self.vocab_size];
        let mut hidden = vec![0.0; self.arch.hidden_dim];
        let mut r = match policy {
            SamplePolicy::Temperature { seed, .. } => Some(rng(seed)),
            SamplePolicy::Greedy => None,
        };
        let mut y = Vec::new();
        while y.len() < max_len {
            base.step(&y, &mut hidden, &mut out);
            let next = match (policy, r.as_mut()) {
                (SamplePolicy::Temperature { tau, .. }, Some(r)) if tau > 0.0 => sample_index(&out, tau, r),
                _ => argmax(&out),
            } as TokenId;
            y.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            tokenizer_id: self.tokenizer_id.clone(),
            vocab_size: self.vocab_size,
            arch: self.arch,
            params: self.data.clone(),
        };
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and refuses it unless it was trained against `tokenizer`.
    pub fn load(path: &Path, tokenizer: &Tokenizer) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint version {} but this build writes {CHECKPOINT_VERSION}",
                file.version
            )));
        }
        if file.tokenizer_id != tokenizer.id() || file.vocab_size != tokenizer.vocab_size() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint bound to tokenizer {} ({} tokens), got {} ({} tokens)",
                file.tokenizer_id,
                file.vocab_size,
                tokenizer.id(),
                tokenizer.vocab_size()
            )));
        }
        file.arch.validate()?;
        if file.params.len() != file.arch.param_count(file.vocab_size) {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameters, found {}",
                file.arch.param_count(file.vocab_size),
                file.params.len()
            )));
        }
        if file.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::CorruptCheckpoint("non-finite parameter".into()));
        }
        Ok(ModelParams {
            arch: file.arch,
            vocab_size: file.vocab_size,
            tokenizer_id: file.tokenizer_id,
            data: file.params,
        })
    }
}

/// Checkpoint fields, serialized in this order.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    tokenizer_id: String,
    vocab_size: usize,
    arch: ArchConfig,
    params: Vec<f64>,
}

fn recent_token(prefix: &[TokenId], r: usize) -> TokenId {
    if r < prefix.len() {
        prefix[prefix.len() - 1 - r]
    } else {
        BOS
    }
}

fn pool(w: &[f64], l: Layout, section: &[TokenId]) -> Vec<f64> {
    let mut out = vec![0.0; l.d];
    if section.is_empty() {
        return out;
    }
    let inv = 1.0 / section.len() as f64;
    for &tok in section {
        let e = l.emb + tok as usize * l.d;
        for i in 0..l.d {
            out[i] += w[e + i] * inv;
        }
    }
    out
}

/// Query and observation contributions to the hidden pre-activation, computed
/// once per (query, observation) and reused at every decoding step.
pub(crate) struct Conditioned<'a> {
    params: &'a ModelParams,
    layout: Layout,
    z0: Vec<f64>,
}

impl<'a> Conditioned<'a> {
    pub(crate) fn new(params: &'a ModelParams, query: &[TokenId], obs: &[TokenId]) -> Self {
        let l = params.layout();
        let w = &params.data;
        let mut z0 = w[l.b_hidden..l.b_hidden + l.h].to_vec();
        for (section, mat) in [(query, l.w_query), (obs, l.w_obs)] {
            if section.is_empty() {
                continue;
            }
            let pooled = pool(w, l, section);
            for (j, z) in z0.iter_mut().enumerate() {
                let row = mat + j * l.d;
                *z += dot(&w[row..row + l.d], &pooled);
            }
        }
        Conditioned { params, layout: l, z0 }
    }

    /// Writes the hidden activation and the next-token log-distribution.
    pub(crate) fn step(&self, prefix: &[TokenId], hidden: &mut [f64], out: &mut [f64]) {
        let l = self.layout;
        let w = &self.params.data;
        hidden.copy_from_slice(&self.z0);
        if !prefix.is_empty() {
            let mean = pool(w, l, prefix);
            for (j, z) in hidden.iter_mut().enumerate() {
                let row = l.w_hist + j * l.d;
                *z += dot(&w[row..row + l.d], &mean);
            }
        }
        for r in 0..l.recent {
            let e = l.emb + recent_token(prefix, r) as usize * l.d;
            let emb = &w[e..e + l.d];
            let mat = l.w_recent + r * l.h * l.d;
            for (j, z) in hidden.iter_mut().enumerate() {
                let row = mat + j * l.d;
                *z += dot(&w[row..row + l.d], emb);
            }
        }
        for z in hidden.iter_mut() {
            *z = z.tanh();
        }
        for (k, o) in out.iter_mut().enumerate() {
            let row = l.w_out + k * l.h;
            *o = w[l.b_out + k] + dot(&w[row..row + l.h], hidden);
        }
        log_softmax_in_place(out);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sample_index(logprobs: &[f64], tau: f64, r: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logprobs.iter().map(|x| x / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = r.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplePolicy {
    /// Argmax with ties to the lowest token id.
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set from the run seeds; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for MleHyper {
    fn default() -> Self {
        MleHyper {
            lr: 1e-2,
            epochs: 12,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    /// Mean per-token NLL of the corpus before training.
    pub initial_nll: f64,
    /// Mean per-token NLL over each epoch's minibatches.
    pub epoch_nll: Vec<f64>,
}

/// Mean per-token negative log-likelihood of `corpus`.
pub fn corpus_nll(params: &ModelParams, corpus: &[Example]) -> f64 {
    let (nll, tokens) = corpus
        .par_iter()
        .map(|ex| {
            (
                -params.seq_logprob_unchecked(&ex.query, &ex.observation, &ex.response),
                ex.response.len(),
            )
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0usize), |(a, n), (b, m)| (a + b, n + m));
    nll / tokens.max(1) as f64
}

/// Maximum-likelihood training with minibatches of per-token-averaged NLL.
/// The input parameters are left untouched.
pub fn train_mle(init: &ModelParams, corpus: &[Example], hyper: &MleHyper) -> Result<(ModelParams, MleReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    for ex in corpus {
        init.check_sequence(&ex.query, &ex.observation, &ex.response)?;
    }
    let mut params = init.clone();
    let initial_nll = corpus_nll(&params, corpus);
    let mut state = OptimizerState::new(hyper.optimizer, params.param_count());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut r = rng(hyper.seed);
    let mut epoch_nll = Vec::with_capacity(hyper.epochs);
    let batch = hyper.batch_size.max(1);

    for epoch in 0..hyper.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut r);
        let (mut nll_sum, mut tok_sum) = (0.0, 0usize);
        for idx in order.chunks(batch) {
            let tokens: usize = idx.iter().map(|&i| corpus[i].response.len()).sum();
            let scale = -1.0 / tokens as f64;
            let partials: Vec<(f64, Vec<f64>)> = idx
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; params.param_count()];
                    let mut lp = 0.0;
                    for &i in chunk {
                        let ex = &corpus[i];
                        lp += params.accumulate_seq_grad(&ex.query, &ex.observation, &ex.response, scale, &mut g);
                    }
                    (lp, g)
                })
                .collect();
            let mut grad = vec![0.0; params.param_count()];
            for (lp, g) in partials {
                nll_sum -= lp;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            tok_sum += tokens;
            state.step(params.as_mut_slice(), &grad, hyper.lr);
        }
        let mean = nll_sum / tok_sum as f64;
        if !mean.is_finite() || params.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::TrainingDiverged { epoch, loss: mean });
        }
        log::debug!("mle epoch {epoch}: nll/token {mean:.4}");
        epoch_nll.push(mean);
    }
    Ok((params, MleReport { initial_nll, epoch_nll }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathutil::logsumexp;
    use crate::tokenization::DEFAULT_ALPHABET;

    fn tok() -> Tokenizer {
        Tokenizer::char_level("abcd".chars()).unwrap()
    }

    fn small_arch(d: usize) -> ArchConfig {
        ArchConfig {
            embed_dim: d,
            hidden_dim: 5,
            recent: 2,
            context_window: 64,
        }
    }

    fn ctx(q: &[TokenId], o: &[TokenId], p: &[TokenId]) -> ContextEncoding {
        ContextEncoding {
            query: q.to_vec(),
            observation: o.to_vec(),
            prefix: p.to_vec(),
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let t = tok();
        let a = ModelParams::init(3, small_arch(4), &t).unwrap();
        let b = ModelParams::init(3, small_arch(4), &t).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|w| w.abs() <= 0.5));
        assert!(a.as_slice().iter().all(|w| w.is_finite()));
    }

    #[test]
    fn param_count_closed_form() {
        // d = 1, h = 5, two recent slots, |V| = 6:
        // 6*1 + (3+2)*5*1 + 5 + 6*5 + 6 = 72
        let t = Tokenizer::char_level("ab".chars()).unwrap();
        let p = ModelParams::init(0, small_arch(1), &t).unwrap();
        assert_eq!(t.vocab_size(), 6);
        assert_eq!(p.param_count(), 72);
        assert_eq!(small_arch(1).param_count(6), 72);
    }

    #[test]
    fn bad_arch_rejected() {
        let arch = ArchConfig {
            context_window: 3,
            ..small_arch(2)
        };
        assert!(matches!(ModelParams::init(0, arch, &tok()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_params_give_uniform() {
        let t = tok();
        let p = ModelParams::zeros(small_arch(3), &t).unwrap();
        let out = p.forward_logprobs(&ctx(&[4, 5], &[6], &[7])).unwrap();
        let expected = -(t.vocab_size() as f64).ln();
        assert!(out.iter().all(|x| (x - expected).abs() < 1e-15));
        let y = [EOS];
        assert!((p.seq_logprob(&[4], &[5], &y).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn outputs_are_normalized() {
        let t = tok();
        for seed in 0..20 {
            let p = ModelParams::init(seed, small_arch(4), &t).unwrap();
            let out = p.forward_logprobs(&ctx(&[4, 5, 6], &[7, 4], &[5, 6, 7, 4])).unwrap();
            assert!(logsumexp(&out).abs() <= 1e-9);
        }
    }

    #[test]
    fn tied_rows_are_interchangeable() {
        let t = tok();
        let mut p = ModelParams::init(1, small_arch(3), &t).unwrap();
        let d = 3;
        // make tokens 4 and 5 share an embedding row
        let row4: Vec<f64> = p.as_slice()[4 * d..5 * d].to_vec();
        p.as_mut_slice()[5 * d..6 * d].copy_from_slice(&row4);
        let a = p.forward_logprobs(&ctx(&[4, 6], &[7], &[4, 5, 6])).unwrap();
        let b = p.forward_logprobs(&ctx(&[5, 6], &[7], &[5, 4, 6])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn window_overflow() {
        let t = tok();
        let p = ModelParams::init(0, small_arch(2), &t).unwrap();
        let long = vec![4; 70];
        assert!(matches!(p.forward_logprobs(&ctx(&long, &[], &[])), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn seq_logprob_matches_stepwise_forward() {
        let t = tok();
        let p = ModelParams::init(9, small_arch(4), &t).unwrap();
        let (q, o) = (vec![4, 5], vec![6, 7, 4]);
        let y = vec![5, 6, 4, 7, EOS];
        let mut expected = 0.0;
        for i in 0..y.len() {
            expected += p.forward_logprobs(&ctx(&q, &o, &y[..i])).unwrap()[y[i] as usize];
        }
        let got = p.seq_logprob(&q, &o, &y).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got <= 0.0);
        assert!(matches!(p.seq_logprob(&q, &o, &[99, EOS]), Err(Error::InvalidTokenId { id: 99, .. })));
        assert!(p.seq_logprob(&q, &o, &[]).is_err());
    }

    #[test]
    fn zero_init_output_gradient_closed_form() {
        // At zero parameters the hidden layer is 0, so only output biases get
        // gradient: onehot(y_t) - uniform, summed over steps.
        let t = tok();
        let p = ModelParams::zeros(small_arch(3), &t).unwrap();
        let y = [4, 5, EOS];
        let (_, g) = p.grad_seq_logprob(&[6], &[7], &y).unwrap();
        let l = p.layout();
        let v = t.vocab_size() as f64;
        for k in 0..t.vocab_size() {
            let hits = y.iter().filter(|&&id| id as usize == k).count() as f64;
            assert!((g[l.b_out + k] - (hits - 3.0 / v)).abs() < 1e-12);
        }
        assert!(g[l.w_out..l.b_out].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unused_embedding_has_zero_gradient() {
        let t = tok();
        let p = ModelParams::init(2, small_arch(3), &t).unwrap();
        let (_, g) = p.grad_seq_logprob(&[4], &[5], &[6, EOS]).unwrap();
        // token 7 ('d') appears nowhere in the context
        assert!(g[7 * 3..8 * 3].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let t = tok();
        let p = ModelParams::init(4, small_arch(4), &t).unwrap();
        let (q, o, y) = (vec![4, 5, 4], vec![6, 7], vec![5, 7, 4, EOS]);
        let (_, g) = p.grad_seq_logprob(&q, &o, &y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.param_count() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (plus.seq_logprob(&q, &o, &y).unwrap() - minus.seq_logprob(&q, &o, &y).unwrap()) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn greedy_follows_forced_chain() {
        // Hand-built model: output depends only on the most recent token, and
        // the table below forces a -> b -> c -> EOS.
        let t = tok();
        let arch = ArchConfig {
            embed_dim: 8,
            hidden_dim: 8,
            recent: 1,
            context_window: 64,
        };
        let mut p = ModelParams::zeros(arch, &t).unwrap();
        let l = p.layout();
        let (a, b, c) = (4usize, 5usize, 6usize);
        let next = [(BOS as usize, a), (a, b), (b, c), (c, EOS as usize)];
        {
            let w = p.as_mut_slice();
            for (slot, &(from, _)) in next.iter().enumerate() {
                // one-hot embedding for the conditioning token, identity mixing
                w[l.emb + from * 8 + slot] = 1.0;
                w[l.w_recent + slot * 8 + slot] = 5.0;
            }
            for (slot, &(_, to)) in next.iter().enumerate() {
                w[l.w_out + to * 8 + slot] = 10.0;
            }
        }
        let y = p.sample_response(&[], &[], SamplePolicy::Greedy, 10).unwrap();
        assert_eq!(y, vec![a as TokenId, b as TokenId, c as TokenId, EOS]);
        let one = p.sample_response(&[], &[], SamplePolicy::Greedy, 1).unwrap();
        assert_eq!(one, vec![a as TokenId]);
    }

    #[test]
    fn greedy_ties_take_lowest_id() {
        let t = tok();
        let p = ModelParams::zeros(small_arch(2), &t).unwrap();
        // uniform output: argmax is token 0
        assert_eq!(p.sample_response(&[], &[], SamplePolicy::Greedy, 1).unwrap(), vec![0]);
    }

    #[test]
    fn temperature_sampling_is_reproducible() {
        let t = tok();
        let p = ModelParams::init(5, small_arch(4), &t).unwrap();
        let pol = SamplePolicy::Temperature { tau: 1.0, seed: 11 };
        let a = p.sample_response(&[4], &[5], pol, 12).unwrap();
        let b = p.sample_response(&[4], &[5], pol, 12).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 12);
    }

    fn corpus_tok() -> Tokenizer {
        Tokenizer::char_level(DEFAULT_ALPHABET.chars()).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let t = corpus_tok();
        let p = ModelParams::init(1, small_arch(4), &t).unwrap();
        let ex = Example {
            query: t.encode("hi"),
            observation: t.encode("lo cat"),
            response: [t.encode("cat"), vec![EOS]].concat(),
        };
        let hyper = MleHyper {
            lr: 0.0,
            epochs: 2,
            ..MleHyper::default()
        };
        let (trained, _) = train_mle(&p, &[ex], &hyper).unwrap();
        assert_eq!(trained, p);
    }

    #[test]
    fn overfits_single_example() {
        let t = corpus_tok();
        let arch = ArchConfig {
            embed_dim: 8,
            hidden_dim: 16,
            recent: 3,
            context_window: 64,
        };
        let p = ModelParams::init(1, arch, &t).unwrap();
        let ex = Example {
            query: t.encode("describe"),
            observation: t.encode("lo red cat"),
            response: [t.encode("cat dog"), vec![EOS]].concat(),
        };
        let hyper = MleHyper {
            lr: 0.05,
            epochs: 300,
            batch_size: 1,
            ..MleHyper::default()
        };
        let (trained, report) = train_mle(&p, std::slice::from_ref(&ex), &hyper).unwrap();
        let nll = corpus_nll(&trained, std::slice::from_ref(&ex));
        assert!(nll < 0.1, "nll/token {nll}");
        assert!(report.epoch_nll[0] < report.initial_nll + 1e-12 || report.epoch_nll[1] < report.initial_nll);
        let greedy = trained
            .sample_response(&ex.query, &ex.observation, SamplePolicy::Greedy, 20)
            .unwrap();
        assert_eq!(greedy, ex.response);
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let t = tok();
        let p = ModelParams::init(8, small_arch(3), &t).unwrap();
        p.save(&path).unwrap();
        let back = ModelParams::load(&path, &t).unwrap();
        assert_eq!(back, p);
        assert!(back.as_slice().iter().zip(p.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let other = Tokenizer::char_level("abcde".chars()).unwrap();
        assert!(matches!(ModelParams::load(&path, &other), Err(Error::CheckpointMismatch(_))));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ModelParams::load(&path, &t), Err(Error::CorruptCheckpoint(_))));
    }
}
