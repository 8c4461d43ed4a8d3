//! Planted-ground-truth data for end-to-end checks.
//!
//! Features are standard normal. A planted `d x k` matrix defines the true
//! per-objective reward `sigmoid(w*^T f)` of a response. Ratings are that
//! reward plus Gaussian noise, clamped to [0, 1]. In each pair, the sign of
//! one prompt coordinate picks which objective decides the preference.
//!
//! The planted verbosity column is orthogonal to the deciding columns, so
//! verbosity is a nuisance direction that debiasing can remove without
//! touching the signal the labels depend on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{FeatureStore, PairRecord, RatedRecord};
use crate::gating::sigmoid;
use crate::regression_head::{predict_rewards, RewardHead};

const RATED_STREAM: u64 = 11;
const PAIR_STREAM: u64 = 12;

/// Selects the deciding objective from the sign of `prompt[coord]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRule {
    pub coord: usize,
    /// Objective used when `prompt[coord] >= 0`.
    pub positive: usize,
    /// Objective used when `prompt[coord] < 0`.
    pub negative: usize,
}

impl ContextRule {
    pub fn objective(&self, prompt: &[f64]) -> usize {
        if prompt[self.coord] >= 0.0 {
            self.positive
        } else {
            self.negative
        }
    }

    /// One-hot gating coefficients of the planted rule.
    pub fn coeffs(&self, prompt: &[f64], k: usize) -> Vec<f64> {
        let mut g = vec![0.0; k];
        g[self.objective(prompt)] = 1.0;
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub n_rated: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    pub context_rule: ContextRule,
    pub noise_scale: f64,
}

impl SyntheticSpec {
    /// Two balanced contexts on prompt coordinate 0 deciding by objectives 0 and 1.
    pub fn two_context(n_pairs: usize, d: usize, k: usize, seed: u64) -> Self {
        Self {
            n_pairs,
            n_rated: n_pairs,
            d,
            k,
            seed,
            context_rule: ContextRule {
                coord: 0,
                positive: 0,
                negative: 1,
            },
            noise_scale: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.k < 2 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs d >= 2 and k >= 2, got d = {}, k = {}",
                self.d, self.k
            )));
        }
        let r = self.context_rule;
        if r.coord >= self.d || r.positive >= self.k || r.negative >= self.k {
            return Err(Error::InvalidArgument(format!("context rule {r:?} out of range")));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise scale {}", self.noise_scale)));
        }
        if self.n_pairs == 0 && self.n_rated == 0 {
            return Err(Error::InvalidArgument("nothing to generate".into()));
        }
        Ok(())
    }

    /// The last objective doubles as the verbosity objective.
    pub fn verbosity_index(&self) -> usize {
        self.k - 1
    }
}

/// Objective names for synthetic stores; the last is always `verbosity`.
pub fn objective_names(k: usize) -> Vec<String> {
    const BASE: [&str; 5] = ["helpfulness", "safety", "correctness", "coherence", "complexity"];
    (0..k)
        .map(|j| {
            if j + 1 == k {
                "verbosity".to_string()
            } else if j < BASE.len() {
                BASE[j].to_string()
            } else {
                format!("objective-{j}")
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub rated: FeatureStore,
    pub pairs: FeatureStore,
    /// `w*`, wrapped as a head so planted logits come from `predict_rewards`.
    pub planted: RewardHead,
    pub rule: ContextRule,
}

impl SyntheticData {
    /// True reward of a response on every objective.
    pub fn planted_rewards(&self, response: &[f64]) -> Result<Vec<f64>> {
        Ok(predict_rewards(&self.planted, response)?.into_iter().map(sigmoid).collect())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects the verbosity column off the span of the deciding columns
/// (Gram-Schmidt), keeping its original norm.
fn orthogonalize_verbosity(columns: &mut [Vec<f64>], verbosity: usize, rule: &ContextRule) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut deciding = vec![rule.positive, rule.negative];
    deciding.dedup();
    for j in deciding.into_iter().filter(|&j| j != verbosity) {
        let mut u = columns[j].clone();
        for q in &basis {
            let c = dot(q, &u);
            u.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
        let norm = dot(&u, &u).sqrt();
        if norm > 1e-12 {
            basis.push(u.into_iter().map(|x| x / norm).collect());
        }
    }
    let v = &mut columns[verbosity];
    let before = dot(v, v).sqrt();
    for q in &basis {
        let c = dot(q, v);
        v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
    }
    let after = dot(v, v).sqrt();
    if after > 1e-12 {
        v.iter_mut().for_each(|x| *x *= before / after);
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, k) = (spec.d, spec.k);
    let names = objective_names(k);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 1.0 / (d as f64).sqrt();
    let columns: Vec<Vec<f64>> = (0..k)
        .map(|_| normal_vec(&mut rng, d).into_iter().map(|v| v * scale).collect())
        .collect();
    let mut columns = columns;
    orthogonalize_verbosity(&mut columns, spec.verbosity_index(), &spec.context_rule);
    let planted = RewardHead::from_columns(columns, names.clone(), 0.0)?;

    let mut rated_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rated_rng.set_stream(RATED_STREAM);
    let noise = (spec.noise_scale > 0.0)
        .then(|| Normal::new(0.0, spec.noise_scale).expect("validated noise scale"));
    let mut rated = Vec::with_capacity(spec.n_rated);
    for _ in 0..spec.n_rated {
        let feature = normal_vec(&mut rated_rng, d);
        let rating = predict_rewards(&planted, &feature)?
            .into_iter()
            .map(|z| {
                let eps = noise.map_or(0.0, |n| n.sample(&mut rated_rng));
                (sigmoid(z) + eps).clamp(0.0, 1.0)
            })
            .collect();
        rated.push(RatedRecord {
            feature,
            rating,
            mask: vec![true; k],
        });
    }

    let mut pair_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pair_rng.set_stream(PAIR_STREAM);
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let prompt = normal_vec(&mut pair_rng, d);
        let a = normal_vec(&mut pair_rng, d);
        let b = normal_vec(&mut pair_rng, d);
        let j = spec.context_rule.objective(&prompt);
        let za = predict_rewards(&planted, &a)?[j];
        let zb = predict_rewards(&planted, &b)?[j];
        let (chosen, rejected) = if za >= zb { (a, b) } else { (b, a) };
        pairs.push(PairRecord {
            prompt,
            chosen,
            rejected,
        });
    }

    Ok(SyntheticData {
        rated: FeatureStore::rated(d, names, rated),
        pairs: FeatureStore::pairs(d, pairs),
        planted,
        rule: spec.context_rule,
    })
}
