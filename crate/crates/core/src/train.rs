//! Bradley-Terry training of the gating network on frozen rewards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{adjust, DebiasProfile};
use crate::error::{Error, Result};
use crate::feature_store::FeatureStore;
use crate::gating::{GateGradient, GatingNetwork, PairScratch, PreparedPair};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::regression_head::{predict_rewards, RewardHead};

/// Examples per reduction chunk. Fixed so the summation order, and with it
/// every trained bit, does not depend on the thread count.
const CHUNK: usize = 32;

const SPLIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Share of pairs held out for the final accuracy; 0 trains on all.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 10_000,
            batch_size: 1024,
            optimizer: AdamWConfig::default(),
            seed: 0,
            holdout_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub lr: Vec<f64>,
    pub holdout_accuracy: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for (t, (lr, loss)) in self.lr.iter().zip(&self.loss).enumerate() {
            out.push_str(&format!("{t},{lr:e},{loss:e}\n"));
        }
        out
    }
}

/// Debiased reward vectors of both responses of every pair.
pub fn prepare_pairs(pairs: &FeatureStore, head: &RewardHead, profile: &DebiasProfile) -> Result<Vec<PreparedPair>> {
    let records = pairs.pair_records()?;
    if pairs.d != head.d() {
        return Err(Error::dim("pair store feature dimension vs head", head.d(), pairs.d));
    }
    if profile.k() != head.k() {
        return Err(Error::dim("debias profile objectives vs head", head.k(), profile.k()));
    }
    records
        .par_iter()
        .map(|p| {
            Ok(PreparedPair {
                prompt: p.prompt.clone(),
                chosen: adjust(&predict_rewards(head, &p.chosen)?, profile)?,
                rejected: adjust(&predict_rewards(head, &p.rejected)?, profile)?,
            })
        })
        .collect()
}

/// Mean loss and gradient over `batch` (indices into `pairs`), reduced in
/// index order.
pub fn batch_loss_grad(net: &GatingNetwork, pairs: &[PreparedPair], batch: &[usize]) -> (f64, GateGradient) {
    let partials: Vec<(f64, GateGradient)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = GateGradient::zeros(net);
            let mut scratch = PairScratch::default();
            let loss = chunk
                .iter()
                .map(|&i| net.accumulate_pair(&pairs[i], &mut scratch, &mut grad))
                .sum::<f64>();
            (loss, grad)
        })
        .collect();
    let mut total = GateGradient::zeros(net);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    (loss * inv, total)
}

/// Forward-only mean loss over `batch`.
pub fn batch_loss(net: &GatingNetwork, pairs: &[PreparedPair], batch: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in batch {
        total += net.pair_loss(&pairs[i])?;
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of pairs the gated score orders correctly; exact ties count half.
pub fn prepared_accuracy(net: &GatingNetwork, pairs: &[PreparedPair], idx: &[usize]) -> Result<f64> {
    let credits = idx
        .par_iter()
        .map(|&i| {
            let p = &pairs[i];
            let g = net.forward(&p.prompt)?;
            let (c, r) = (dot(&g, &p.chosen), dot(&g, &p.rejected));
            Ok(if c > r { 1.0 } else if c == r { 0.5 } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(credits.iter().sum::<f64>() / idx.len() as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Epoch-based sampler: reshuffles at each epoch and emits the trailing
/// partial batch as its own batch.
struct BatchSampler {
    rng: ChaCha8Rng,
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Self {
            rng,
            order: Vec::with_capacity(pool.len()),
            pool,
            cursor: 0,
            batch_size,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.clone_from(&self.pool);
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + self.batch_size).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

/// Splits `0..n` into (train, holdout) with a seeded shuffle.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let n_hold = (n as f64 * fraction).floor() as usize;
    if n_hold == 0 {
        return (idx, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let hold = idx.split_off(n - n_hold);
    (idx, hold)
}

/// Trains the gate and `beta` with the head and debias profile frozen.
pub fn train_gate(
    net: &GatingNetwork,
    pairs: &FeatureStore,
    head: &RewardHead,
    profile: &DebiasProfile,
    cfg: &TrainConfig,
) -> Result<(GatingNetwork, TrainHistory)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("pair store has no pairs".into()));
    }
    if net.input_dim() != head.d() {
        return Err(Error::dim("gate input vs head feature dimension", head.d(), net.input_dim()));
    }
    if net.output_dim() != head.k() {
        return Err(Error::dim("gate output vs head objectives", head.k(), net.output_dim()));
    }
    let prepared = prepare_pairs(pairs, head, profile)?;
    train_prepared(net, &prepared, cfg)
}

pub fn train_prepared(net: &GatingNetwork, prepared: &[PreparedPair], cfg: &TrainConfig) -> Result<(GatingNetwork, TrainHistory)> {
    cfg.validate()?;
    let (train_idx, hold_idx) = holdout_split(prepared.len(), cfg.holdout_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Empty("no training pairs left after the holdout split".into()));
    }

    let mut net = net.clone();
    let mut opt = AdamW::new(cfg.optimizer, net.params().len());
    let mut sampler = BatchSampler::new(train_idx, cfg.batch_size, cfg.seed);
    let mut history = TrainHistory {
        loss: Vec::with_capacity(cfg.steps),
        lr: Vec::with_capacity(cfg.steps),
        holdout_accuracy: None,
    };

    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.learning_rate, step, cfg.steps);
        let batch = sampler.next_batch();
        let (loss, grad) = batch_loss_grad(&net, prepared, batch);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let mut beta = net.beta;
        opt.step(lr, net.params_mut(), &grad.params, &mut beta, grad.beta);
        net.beta = beta;
        history.loss.push(loss);
        history.lr.push(lr);
    }
    if !net.beta.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    if !hold_idx.is_empty() {
        history.holdout_accuracy = Some(prepared_accuracy(&net, prepared, &hold_idx)?);
    }
    Ok((net, history))
}
