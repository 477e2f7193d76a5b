// SPDX-License-Identifier: Apache-2.0

//! Reference-free sequence-level DPO for the autoregressive reward model, and
//! the Bradley-Terry reward-equivalence helpers.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathutil::{log_sigmoid, logsumexp, sigmoid};
use crate::model::{ModelParams, GRAD_CHUNK};
use crate::optim::{Optimizer, OptimizerState};
use crate::seed::rng;
use crate::tokenization::TokenId;

/// `exp(r_w) / (exp(r_w) + exp(r_l))`, evaluated as `sigmoid(r_w - r_l)`.
pub fn bt_probability(r_w: f64, r_l: f64) -> Result<f64> {
    if !r_w.is_finite() || !r_l.is_finite() {
        return Err(Error::InvalidReward(format!("non-finite reward ({r_w}, {r_l})")));
    }
    Ok(sigmoid(r_w - r_l))
}

/// One preference pair tokenized for the reward model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub scene_id: u64,
    pub query: Vec<TokenId>,
    pub observation: Vec<TokenId>,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy)]
pub struct DpoBatch<'a> {
    pub pairs: &'a [DpoPair],
    pub beta: f64,
}

impl<'a> DpoBatch<'a> {
    pub fn new(pairs: &'a [DpoPair], beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be finite and >= 0, got {beta}")));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty preference batch".into()));
        }
        Ok(DpoBatch { pairs, beta })
    }
}

/// `seq_logprob(y_w) - seq_logprob(y_l)` under the reward model.
pub fn margin(params: &ModelParams, pair: &DpoPair) -> Result<f64> {
    Ok(params.seq_logprob(&pair.query, &pair.observation, &pair.y_w)?
        - params.seq_logprob(&pair.query, &pair.observation, &pair.y_l)?)
}

fn margins(params: &ModelParams, pairs: &[DpoPair]) -> Result<Vec<f64>> {
    pairs.par_iter().map(|p| margin(params, p)).collect()
}

/// Mean of `-log sigmoid(beta * margin)` over the batch.
pub fn dpo_loss(params: &ModelParams, batch: &DpoBatch) -> Result<f64> {
    let m = margins(params, batch.pairs)?;
    Ok(m.iter().map(|&m| -log_sigmoid(batch.beta * m)).sum::<f64>() / m.len() as f64)
}

/// Gradient of [`dpo_loss`] with respect to the reward-model parameters.
pub fn dpo_grad(params: &ModelParams, batch: &DpoBatch) -> Result<Vec<f64>> {
    Ok(loss_and_grad(params, batch)?.1)
}

fn loss_and_grad(params: &ModelParams, batch: &DpoBatch) -> Result<(f64, Vec<f64>)> {
    let m = margins(params, batch.pairs)?;
    let n = batch.pairs.len() as f64;
    let beta = batch.beta;
    let loss = m.iter().map(|&m| -log_sigmoid(beta * m)).sum::<f64>() / n;
    let idx: Vec<usize> = (0..batch.pairs.len()).collect();
    let partials: Vec<Vec<f64>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.param_count()];
            for &i in chunk {
                // d/dtheta of -log sigmoid(beta m) = -sigmoid(-beta m) * beta * dm
                let coef = -sigmoid(-beta * m[i]) * beta / n;
                if coef == 0.0 {
                    continue;
                }
                let p = &batch.pairs[i];
                params.accumulate_seq_grad(&p.query, &p.observation, &p.y_w, coef, &mut g);
                params.accumulate_seq_grad(&p.query, &p.observation, &p.y_l, -coef, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; params.param_count()];
    for g in partials {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoHyper {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set from the run seeds; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub holdout_frac: f64,
    pub optimizer: Optimizer,
}

impl Default for DpoHyper {
    fn default() -> Self {
        DpoHyper {
            beta: 0.1,
            lr: 1e-2,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            holdout_frac: 0.1,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl DpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::InvalidConfig(format!(
                "holdout_frac must be in [0, 1), got {}",
                self.holdout_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss over the training split before any update.
    pub initial_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub loss_per_epoch: Vec<f64>,
    /// Fraction of held-out pairs with a positive margin. When the holdout is
    /// empty this is measured on the training pairs instead.
    pub holdout_margin_acc: f64,
    pub holdout_is_train: bool,
    pub train_margin_acc: f64,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub seed: u64,
    pub hyper: DpoHyper,
}

/// Splits pairs by scene id so no scene lands on both sides.
pub fn split_by_scene(pairs: &[DpoPair], holdout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut scenes: Vec<u64> = pairs.iter().map(|p| p.scene_id).collect::<BTreeSet<_>>().into_iter().collect();
    scenes.shuffle(&mut rng(seed ^ 0x5ce4e));
    let n_hold = (holdout_frac * scenes.len() as f64).round() as usize;
    let n_hold = n_hold.min(scenes.len().saturating_sub(1));
    let held: BTreeSet<u64> = scenes[..n_hold].iter().copied().collect();
    (0..pairs.len()).partition(|&i| !held.contains(&pairs[i].scene_id))
}

fn margin_accuracy(params: &ModelParams, pairs: &[DpoPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let m = margins(params, pairs)?;
    Ok(m.iter().filter(|&&m| m > 0.0).count() as f64 / m.len() as f64)
}

/// Minibatch DPO. The input parameters are left untouched.
pub fn train_reward(init: &ModelParams, pairs: &[DpoPair], hyper: &DpoHyper) -> Result<(ModelParams, TrainReport)> {
    hyper.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("preference dataset is empty".into()));
    }
    let (train_idx, hold_idx) = split_by_scene(pairs, hyper.holdout_frac, hyper.seed);
    let train: Vec<DpoPair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let hold: Vec<DpoPair> = hold_idx.iter().map(|&i| pairs[i].clone()).collect();

    let mut params = init.clone();
    let initial_loss = dpo_loss(&params, &DpoBatch::new(&train, hyper.beta)?)?;
    let mut state = OptimizerState::new(hyper.optimizer, params.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng(hyper.seed);
    let mut loss_per_epoch = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(hyper.batch_size) {
            let chunk: Vec<DpoPair> = idx.iter().map(|&i| train[i].clone()).collect();
            let (loss, grad) = loss_and_grad(&params, &DpoBatch::new(&chunk, hyper.beta)?)?;
            total += loss;
            batches += 1;
            state.step(params.as_mut_slice(), &grad, hyper.lr);
        }
        let mean = total / batches as f64;
        if !mean.is_finite() || params.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::TrainingDiverged { epoch, loss: mean });
        }
        log::debug!("dpo epoch {epoch}: loss {mean:.5}");
        loss_per_epoch.push(mean);
    }

    let train_margin_acc = margin_accuracy(&params, &train)?;
    let (holdout_margin_acc, holdout_is_train) = if hold.is_empty() {
        (train_margin_acc, true)
    } else {
        (margin_accuracy(&params, &hold)?, false)
    };
    let report = TrainReport {
        initial_loss,
        loss_per_epoch,
        holdout_margin_acc,
        holdout_is_train,
        train_margin_acc,
        train_pairs: train.len(),
        holdout_pairs: hold.len(),
        seed: hyper.seed,
        hyper: *hyper,
    };
    Ok((params, report))
}

/// Rewards of a fixed (query, input) over a finite response set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub entries: Vec<(String, f64)>,
}

impl RewardTable {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidTable("reward table is empty".into()));
        }
        if let Some((y, r)) = entries.iter().find(|(_, r)| !r.is_finite()) {
            return Err(Error::InvalidTable(format!("reward for {y:?} is {r}")));
        }
        Ok(RewardTable { entries })
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, r)| *r).collect()
    }

    /// Response with the highest reward; ties go to the earliest entry.
    pub fn argmax(&self) -> &str {
        let i = crate::mathutil::argmax(&self.values());
        &self.entries[i].0
    }
}

/// `r(y) - logsumexp_z r(z)`: the log-probability member of the reward's
/// equivalence class.
pub fn normalize_reward(table: &RewardTable) -> Result<RewardTable> {
    if table.entries.is_empty() {
        return Err(Error::InvalidTable("reward table is empty".into()));
    }
    let lse = logsumexp(&table.values());
    RewardTable::new(table.entries.iter().map(|(y, r)| (y.clone(), r - lse)).collect())
}

/// `M[i][j] = bt_probability(r_i, r_j)`.
pub fn preference_matrix(table: &RewardTable) -> Result<Vec<Vec<f64>>> {
    if table.entries.len() < 2 {
        return Err(Error::InvalidTable("need at least two responses".into()));
    }
    let r = table.values();
    r.iter()
        .map(|&ri| r.iter().map(|&rj| bt_probability(ri, rj)).collect())
        .collect()
}
