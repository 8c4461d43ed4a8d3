//! Pairwise evaluation, weighted category scoring and per-response reward
//! decomposition.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{adjust, DebiasProfile};
use crate::error::{Error, Result};
use crate::feature_store::FeatureStore;
use crate::gating::{gate_forward, scalar_score, GatingNetwork};
use crate::regression_head::{predict_rewards, RewardHead};

/// Fraction of pairs where `score(prompt, chosen) > score(prompt, rejected)`;
/// exact ties count 0.5.
pub fn pairwise_accuracy<F>(score: F, pairs: &FeatureStore) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    let records = pairs.pair_records()?;
    if records.is_empty() {
        return Err(Error::Empty("pair store has no pairs".into()));
    }
    let credits = records
        .par_iter()
        .map(|p| {
            let c = score(&p.prompt, &p.chosen)?;
            let r = score(&p.prompt, &p.rejected)?;
            Ok(credit(c, r))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(credits.iter().sum::<f64>() / records.len() as f64)
}

pub(crate) fn credit(chosen: f64, rejected: f64) -> f64 {
    if chosen > rejected {
        1.0
    } else if chosen == rejected {
        0.5
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub name: String,
    /// In [0, 1].
    pub accuracy: f64,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<usize>,
}

/// Weighted mean of category accuracies, in [0, 1].
pub fn weighted_score(categories: &[CategoryResult]) -> Result<f64> {
    if categories.is_empty() {
        return Err(Error::Empty("no categories to score".into()));
    }
    if let Some(c) = categories.iter().find(|c| !(c.weight > 0.0 && c.weight.is_finite())) {
        return Err(Error::InvalidArgument(format!("category {:?} has weight {}", c.name, c.weight)));
    }
    let total: f64 = categories.iter().map(|c| c.weight).sum();
    Ok(categories.iter().map(|c| c.weight * c.accuracy).sum::<f64>() / total)
}

/// A [0, 1] accuracy as a percentage rounded half-to-even to one decimal.
pub fn percent_1dp(fraction: f64) -> f64 {
    (fraction * 1000.0).round_ties_even() / 10.0
}

/// Where the simplex coefficients come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Network(GatingNetwork),
    /// Fixed coefficients that bypass the network.
    Fixed(Vec<f64>),
}

impl Gate {
    pub fn coeffs(&self, prompt: &[f64]) -> Result<Vec<f64>> {
        match self {
            Gate::Network(net) => gate_forward(net, prompt),
            Gate::Fixed(w) => Ok(w.clone()),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Gate::Network(net) => net.output_dim(),
            Gate::Fixed(w) => w.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub objective_names: Vec<String>,
    pub raw_rewards: Vec<f64>,
    pub adjusted_rewards: Vec<f64>,
    pub gating_coeffs: Vec<f64>,
    pub scalar_score: f64,
    pub contributions: Vec<f64>,
}

/// Head, debias profile and gate composed into a single reward model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub head: RewardHead,
    pub profile: DebiasProfile,
    pub gate: Gate,
}

impl Scorer {
    pub fn new(head: RewardHead, profile: DebiasProfile, gate: Gate) -> Result<Self> {
        if profile.k() != head.k() {
            return Err(Error::dim("debias profile objectives vs head", head.k(), profile.k()));
        }
        if gate.output_dim() != head.k() {
            return Err(Error::dim("gate output vs head objectives", head.k(), gate.output_dim()));
        }
        if let Gate::Network(net) = &gate {
            if net.input_dim() != head.d() {
                return Err(Error::dim("gate input vs head feature dimension", head.d(), net.input_dim()));
            }
        }
        Ok(Self { head, profile, gate })
    }

    pub fn adjusted_rewards(&self, response: &[f64]) -> Result<Vec<f64>> {
        adjust(&predict_rewards(&self.head, response)?, &self.profile)
    }

    pub fn score(&self, prompt: &[f64], response: &[f64]) -> Result<f64> {
        scalar_score(&self.gate.coeffs(prompt)?, &self.adjusted_rewards(response)?)
    }

    pub fn decompose(&self, prompt: &[f64], response: &[f64]) -> Result<DecompositionReport> {
        let raw = predict_rewards(&self.head, response)?;
        let adjusted = adjust(&raw, &self.profile)?;
        let coeffs = self.gate.coeffs(prompt)?;
        let scalar = scalar_score(&coeffs, &adjusted)?;
        let contributions = coeffs.iter().zip(&adjusted).map(|(g, r)| g * r).collect();
        Ok(DecompositionReport {
            objective_names: self.head.objective_names.clone(),
            raw_rewards: raw,
            adjusted_rewards: adjusted,
            gating_coeffs: coeffs,
            scalar_score: scalar,
            contributions,
        })
    }

    pub fn accuracy(&self, pairs: &FeatureStore) -> Result<f64> {
        pairwise_accuracy(|p, r| self.score(p, r), pairs)
    }
}

/// Per-objective breakdown of one response's score.
pub fn decompose(
    head: &RewardHead,
    profile: &DebiasProfile,
    net: &GatingNetwork,
    prompt: &[f64],
    response: &[f64],
) -> Result<DecompositionReport> {
    Scorer::new(head.clone(), profile.clone(), Gate::Network(net.clone()))?.decompose(prompt, response)
}

/// Parses `name=weight[,name=weight...]` into simplex coefficients over
/// `names`; unnamed objectives get weight 0.
pub fn parse_steer(spec: &str, names: &[String]) -> Result<Vec<f64>> {
    let mut w = vec![0.0; names.len()];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("steer entry {part:?} is not name=weight")))?;
        let j = names
            .iter()
            .position(|n| n == name.trim())
            .ok_or_else(|| Error::UnknownObjective(name.trim().to_string()))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("steer weight {value:?} is not a number")))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("steer weight for {name:?} must be >= 0")));
        }
        w[j] += v;
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("steer weights must have a positive sum".into()));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Every point of the simplex in `k` dimensions on a grid of `1/divisions`.
pub fn simplex_grid(k: usize, divisions: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in 0..=left {
            prefix.push(a);
            rec(k, left - a, prefix, out);
            prefix.pop();
        }
    }
    if k == 0 {
        return Vec::new();
    }
    let mut ints = Vec::new();
    rec(k, divisions, &mut Vec::with_capacity(k), &mut ints);
    ints.into_iter()
        .map(|v| v.into_iter().map(|a| a as f64 / divisions as f64).collect())
        .collect()
}

/// Best fixed-coefficient scalarization over a simplex grid with spacing
/// `step`, scored by pairwise accuracy on `(chosen, rejected)` reward pairs.
pub fn best_fixed_simplex(chosen: &[Vec<f64>], rejected: &[Vec<f64>], step: f64) -> Result<(Vec<f64>, f64)> {
    if chosen.is_empty() || chosen.len() != rejected.len() {
        return Err(Error::InvalidArgument("need equally many, and at least one, chosen and rejected rows".into()));
    }
    let divisions = (1.0 / step).round() as usize;
    if divisions == 0 || ((divisions as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("grid step {step} does not divide 1")));
    }
    let k = chosen[0].len();
    let grid = simplex_grid(k, divisions);
    let scored: Vec<f64> = grid
        .par_iter()
        .map(|w| {
            let hits: f64 = chosen
                .iter()
                .zip(rejected)
                .map(|(c, r)| credit(dot(w, c), dot(w, r)))
                .sum();
            hits / chosen.len() as f64
        })
        .collect();
    let (best, acc) = scored
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, ba), (i, &a)| if a > ba { (i, a) } else { (bi, ba) });
    Ok((grid[best].clone(), acc))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs_path: Option<String>,
    /// Precomputed accuracy in [0, 1], used instead of `pairs_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub categories: Vec<CategorySpec>,
}

impl EvalManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.categories.is_empty() {
            return Err(Error::Empty("evaluation manifest has no categories".into()));
        }
        for c in &m.categories {
            match (&c.pairs_path, c.accuracy) {
                (Some(_), None) => {}
                (None, Some(a)) if (0.0..=1.0).contains(&a) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "category {:?} needs exactly one of pairs_path or an accuracy in [0, 1]",
                        c.name
                    )))
                }
            }
        }
        Ok(m)
    }

    pub fn needs_model(&self) -> bool {
        self.categories.iter().any(|c| c.pairs_path.is_some())
    }

    /// Scores each category; relative `pairs_path`s resolve against `base`.
    pub fn evaluate(&self, scorer: Option<&Scorer>, base: &Path) -> Result<EvalReport> {
        let mut results = Vec::with_capacity(self.categories.len());
        for c in &self.categories {
            let (accuracy, n_pairs) = match (&c.pairs_path, c.accuracy) {
                (Some(path), _) => {
                    let path = resolve(base, path);
                    let store = crate::feature_store::load_store(&path)?;
                    let scorer = scorer.ok_or_else(|| {
                        Error::InvalidArgument(format!("category {:?} needs a model to score pairs", c.name))
                    })?;
                    (scorer.accuracy(&store)?, Some(store.len()))
                }
                (None, Some(a)) => (a, None),
                (None, None) => unreachable!("validated on load"),
            };
            results.push(CategoryResult {
                name: c.name.clone(),
                accuracy,
                weight: c.weight,
                n_pairs,
            });
        }
        EvalReport::new(results)
    }
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryResult>,
    /// Weighted accuracy in [0, 1].
    pub score: f64,
    /// `score` as a percentage rounded to one decimal.
    pub score_percent: f64,
}

impl EvalReport {
    pub fn new(categories: Vec<CategoryResult>) -> Result<Self> {
        let score = weighted_score(&categories)?;
        Ok(Self {
            categories,
            score,
            score_percent: percent_1dp(score),
        })
    }

    /// Plain-text table with one column per category, like a leaderboard row.
    pub fn to_table(&self, model: &str) -> String {
        let mut headers = vec!["Model".to_string(), "Score".to_string()];
        let mut cells = vec![model.to_string(), format!("{:.1}", self.score_percent)];
        for c in &self.categories {
            headers.push(if c.weight == 1.0 {
                c.name.clone()
            } else {
                format!("{} ({} weight)", c.name, c.weight)
            });
            cells.push(format!("{:.1}", percent_1dp(c.accuracy)));
        }
        let widths: Vec<usize> = headers.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut out = String::new();
        let row = |out: &mut String, items: &[String]| {
            let parts: Vec<String> = items.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join(" | "));
        };
        row(&mut out, &headers);
        let _ = writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-")
        );
        row(&mut out, &cells);
        out
    }
}
