//! Verbosity debiasing of per-objective rewards.
//!
//! Each objective is adjusted as `r_i' = r_i - lambda_i * r_verbose`, with
//! `lambda_i >= 0` chosen so that the adjusted reward is uncorrelated with the
//! verbosity objective on a reference set.
//!
//! Conventions:
//! - the correlation of a constant vector with anything is `0.0`;
//! - the verbosity objective itself gets `lambda = 1.0`, zeroing it;
//! - objectives already non-positively correlated get `lambda = 0.0`.
//!
//! Spearman correlation of the adjusted reward is a step function of `lambda`,
//! so an exact zero may not exist. Calibration bisects to a tolerance and,
//! when the bracket collapses onto a jump, reports the objective as
//! unattainable together with the size of the jump.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Spearman,
    Pearson,
}

impl Metric {
    pub fn corr(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Spearman => spearman(a, b),
            Metric::Pearson => pearson(a, b),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spearman" => Ok(Metric::Spearman),
            "pearson" => Ok(Metric::Pearson),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("correlation inputs", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 samples, got {}",
            a.len()
        )));
    }
    Ok(())
}

fn pearson_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Pearson correlation; 0.0 if either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if is_constant(a) || is_constant(b) {
        return Ok(0.0);
    }
    Ok(pearson_unchecked(a, b))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0.0 if either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    if is_constant(a) || is_constant(b) {
        return Ok(0.0);
    }
    Ok(pearson_unchecked(&average_ranks(a), &average_ranks(b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrateConfig {
    pub metric: Metric,
    /// Target on |corr|.
    pub tol: f64,
    /// Initial upper end of the lambda bracket; doubled until the correlation
    /// turns negative or `bracket_cap` is reached.
    pub bracket_max: f64,
    pub bracket_cap: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Spearman,
            tol: 1e-3,
            bracket_max: 10.0,
            bracket_cap: 1e4,
        }
    }
}

const MIN_BRACKET_WIDTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasProfile {
    pub metric: Metric,
    pub verbosity_index: usize,
    pub lambda: Vec<f64>,
    pub achieved_corr: Vec<f64>,
    pub reference_id: String,
    /// Objectives whose |corr| could not be brought within tolerance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unattainable: Vec<bool>,
    /// Jump in correlation across the final bracket for unattainable objectives.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_gap: Vec<f64>,
}

impl DebiasProfile {
    /// No penalty on any objective other than verbosity, which is zeroed.
    pub fn identity(k: usize, verbosity_index: usize, reference_id: impl Into<String>) -> Result<Self> {
        if verbosity_index >= k {
            return Err(Error::InvalidArgument(format!(
                "verbosity index {verbosity_index} out of range for k = {k}"
            )));
        }
        let mut lambda = vec![0.0; k];
        lambda[verbosity_index] = 1.0;
        Ok(Self {
            metric: Metric::Spearman,
            verbosity_index,
            lambda,
            achieved_corr: vec![0.0; k],
            reference_id: reference_id.into(),
            unattainable: vec![false; k],
            step_gap: vec![0.0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.verbosity_index >= k {
            return Err(Error::InvalidArgument(format!(
                "verbosity index {} out of range for k = {k}",
                self.verbosity_index
            )));
        }
        if self.achieved_corr.len() != k {
            return Err(Error::dim("profile achieved_corr", k, self.achieved_corr.len()));
        }
        for (what, v) in [("unattainable", self.unattainable.len()), ("step_gap", self.step_gap.len())] {
            if v != 0 && v != k {
                return Err(Error::dim(format!("profile {what}"), k, v));
            }
        }
        if self.lambda.iter().chain(&self.achieved_corr).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("debias profile".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `r_i - lambda_i * r[verbosity]` for every objective.
pub fn adjust(r: &[f64], profile: &DebiasProfile) -> Result<Vec<f64>> {
    if r.len() != profile.k() {
        return Err(Error::dim("rewards passed to debias adjust", profile.k(), r.len()));
    }
    let verbose = r[profile.verbosity_index];
    Ok(r.iter().zip(&profile.lambda).map(|(&ri, &l)| ri - l * verbose).collect())
}

struct Objective<'a> {
    reward: &'a [f64],
    verbose: &'a [f64],
    metric: Metric,
    scratch: Vec<f64>,
}

impl Objective<'_> {
    fn rho(&mut self, lambda: f64) -> f64 {
        for ((s, &r), &v) in self.scratch.iter_mut().zip(self.reward).zip(self.verbose) {
            *s = r - lambda * v;
        }
        self.metric
            .corr(&self.scratch, self.verbose)
            .expect("lengths checked by calibrate")
    }

    /// Lambdas in `[lo, hi]` at which two samples of the adjusted reward
    /// swap order, taken from neighbours in the ordering at `at`.
    fn crossings(&mut self, lo: f64, hi: f64, at: f64) -> Vec<f64> {
        for ((s, &r), &v) in self.scratch.iter_mut().zip(self.reward).zip(self.verbose) {
            *s = r - at * v;
        }
        let mut order: Vec<usize> = (0..self.scratch.len()).collect();
        order.sort_by(|&i, &j| self.scratch[i].total_cmp(&self.scratch[j]));
        let mut out: Vec<f64> = order
            .windows(2)
            .filter_map(|w| {
                let (i, j) = (w[0], w[1]);
                let dv = self.verbose[i] - self.verbose[j];
                (dv != 0.0).then(|| (self.reward[i] - self.reward[j]) / dv)
            })
            .filter(|l| (lo..=hi).contains(l))
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Solved {
    lambda: f64,
    corr: f64,
    unattainable: bool,
    step_gap: f64,
}

fn solve_lambda(obj: &mut Objective<'_>, cfg: &CalibrateConfig) -> Solved {
    let attained = |lambda, corr| Solved {
        lambda,
        corr,
        unattainable: false,
        step_gap: 0.0,
    };
    let rho0 = obj.rho(0.0);
    if rho0 <= cfg.tol {
        // already within tolerance, or negatively correlated: no penalty
        return Solved {
            unattainable: rho0.abs() > cfg.tol,
            ..attained(0.0, rho0.abs())
        };
    }

    let mut hi = cfg.bracket_max.min(cfg.bracket_cap);
    let mut rho_hi = obj.rho(hi);
    while rho_hi > 0.0 && hi < cfg.bracket_cap {
        hi = (hi * 2.0).min(cfg.bracket_cap);
        rho_hi = obj.rho(hi);
    }
    if rho_hi.abs() <= cfg.tol {
        return attained(hi, rho_hi.abs());
    }
    if rho_hi > 0.0 {
        return Solved {
            lambda: hi,
            corr: rho_hi,
            unattainable: true,
            step_gap: 0.0,
        };
    }

    let (mut lo, mut rho_lo) = (0.0, rho0);
    loop {
        let mid = 0.5 * (lo + hi);
        let rho_mid = obj.rho(mid);
        if rho_mid.abs() <= cfg.tol {
            return attained(mid, rho_mid.abs());
        }
        if rho_mid > 0.0 {
            lo = mid;
            rho_lo = rho_mid;
        } else {
            hi = mid;
        }
        if hi - lo < MIN_BRACKET_WIDTH {
            break;
        }
    }

    let mid = 0.5 * (lo + hi);
    let rho_mid = obj.rho(mid);
    let mut best = Solved {
        lambda: mid,
        corr: rho_mid.abs(),
        unattainable: true,
        step_gap: rho_lo - obj.rho(hi),
    };
    // The bracket sits on a jump; the exact crossing point may tie samples and
    // land on the zero between the two plateaus.
    for lambda in obj.crossings(lo, hi, mid) {
        let c = obj.rho(lambda).abs();
        if c < best.corr {
            best.lambda = lambda;
            best.corr = c;
        }
    }
    if best.corr <= cfg.tol {
        best.unattainable = false;
        best.step_gap = 0.0;
    }
    best
}

/// Chooses a penalty per objective so its adjusted reward decorrelates from
/// the verbosity column. `rewards` is row-major, one row of `k` predicted
/// rewards per reference response.
pub fn calibrate(
    rewards: &[Vec<f64>],
    verbosity_index: usize,
    cfg: &CalibrateConfig,
    reference_id: &str,
) -> Result<DebiasProfile> {
    let n = rewards.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("calibration needs at least 3 rows, got {n}")));
    }
    let k = rewards[0].len();
    if verbosity_index >= k {
        return Err(Error::InvalidArgument(format!(
            "verbosity index {verbosity_index} out of range for k = {k}"
        )));
    }
    if !(cfg.tol >= 0.0 && cfg.bracket_max > 0.0 && cfg.bracket_cap >= cfg.bracket_max) {
        return Err(Error::InvalidArgument(format!("invalid calibration settings {cfg:?}")));
    }
    for (i, row) in rewards.iter().enumerate() {
        if row.len() != k {
            return Err(Error::dim(format!("reward row {i}"), k, row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reward row {i}")));
        }
    }
    let columns: Vec<Vec<f64>> = (0..k).map(|j| rewards.iter().map(|r| r[j]).collect()).collect();
    let verbose = &columns[verbosity_index];
    if is_constant(verbose) {
        return Err(Error::ConstantVerbosity(verbosity_index));
    }

    let solved: Vec<Solved> = (0..k)
        .into_par_iter()
        .map(|j| {
            if j == verbosity_index {
                return Solved {
                    lambda: 1.0,
                    corr: 0.0,
                    unattainable: false,
                    step_gap: 0.0,
                };
            }
            let mut obj = Objective {
                reward: &columns[j],
                verbose,
                metric: cfg.metric,
                scratch: vec![0.0; n],
            };
            solve_lambda(&mut obj, cfg)
        })
        .collect();

    Ok(DebiasProfile {
        metric: cfg.metric,
        verbosity_index,
        lambda: solved.iter().map(|s| s.lambda).collect(),
        achieved_corr: solved.iter().map(|s| s.corr).collect(),
        reference_id: reference_id.to_string(),
        unattainable: solved.iter().map(|s| s.unattainable).collect(),
        step_gap: solved.iter().map(|s| s.step_gap).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_anchors() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let tied = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((tied - 0.9486832980505138).abs() <= 1e-15, "{tied}");
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(average_ranks(&[3.0, -1.0, 3.0, 0.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn correlation_errors_and_constants() {
        assert!(matches!(spearman(&[1.0], &[2.0]), Err(Error::InvalidArgument(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[2.0]), Err(Error::DimensionMismatch { .. })));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn adjust_arithmetic() {
        let profile = DebiasProfile {
            lambda: vec![0.4, 1.0],
            ..DebiasProfile::identity(2, 1, "t").unwrap()
        };
        let out = adjust(&[0.8, 0.5], &profile).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert_eq!(out[1], 0.0);

        let zero = DebiasProfile {
            lambda: vec![0.0, 0.0],
            ..profile.clone()
        };
        assert_eq!(adjust(&[0.8, 0.5], &zero).unwrap(), vec![0.8, 0.5]);
        assert!(matches!(adjust(&[1.0], &profile), Err(Error::DimensionMismatch { .. })));
    }

    fn rows(cols: &[&[f64]]) -> Vec<Vec<f64>> {
        (0..cols[0].len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
    }

    #[test]
    fn identical_objective_gets_unit_penalty() {
        let v = [0.1, 0.5, 0.3, 0.9, 0.7];
        let p = calibrate(&rows(&[&v, &v]), 1, &CalibrateConfig::default(), "ref").unwrap();
        assert_eq!(p.lambda, vec![1.0, 1.0]);
        assert_eq!(p.achieved_corr, vec![0.0, 0.0]);
        assert_eq!(p.unattainable, vec![false, false]);
    }

    #[test]
    fn anticorrelated_objective_is_not_penalized() {
        let v = [0.1, 0.2, 0.3, 0.4, 0.5];
        let r = [0.9, 0.1, 0.5, 0.3, 0.0];
        let p = calibrate(&rows(&[&r, &v]), 1, &CalibrateConfig::default(), "ref").unwrap();
        assert_eq!(p.lambda[0], 0.0);
    }

    #[test]
    fn pearson_recovers_proportionality() {
        let v: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 10.0 + 0.05 * i as f64).collect();
        let r: Vec<f64> = v.iter().map(|x| 2.5 * x).collect();
        let cfg = CalibrateConfig {
            metric: Metric::Pearson,
            ..Default::default()
        };
        let p = calibrate(&rows(&[&r, &v]), 1, &cfg, "ref").unwrap();
        assert!((p.lambda[0] - 2.5).abs() <= 1e-9, "{}", p.lambda[0]);
        assert!(p.achieved_corr[0] <= cfg.tol);
    }

    #[test]
    fn calibrate_errors() {
        let v = [0.3, 0.3, 0.3];
        let r = [0.1, 0.2, 0.3];
        let cfg = CalibrateConfig::default();
        assert!(matches!(calibrate(&rows(&[&r, &v]), 1, &cfg, ""), Err(Error::ConstantVerbosity(1))));
        assert!(calibrate(&rows(&[&r[..2], &v[..2]]), 1, &cfg, "").is_err());
        let bad = [0.1, f64::NAN, 0.3];
        assert!(matches!(calibrate(&rows(&[&bad, &r]), 1, &cfg, ""), Err(Error::NonFinite(_))));
    }

    #[test]
    fn profile_json_schema() {
        let p = DebiasProfile::identity(3, 2, "uf").unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(v["metric"], "spearman");
        assert_eq!(v["verbosity_index"], 2);
        assert_eq!(v["lambda"], serde_json::json!([0.0, 0.0, 1.0]));
        assert_eq!(v["reference_id"], "uf");
        // the minimal schema without the diagnostic fields still loads
        let minimal = r#"{"metric":"pearson","verbosity_index":0,"lambda":[1.0,0.2],"achieved_corr":[0.0,0.0],"reference_id":"x"}"#;
        let q = DebiasProfile::from_json(minimal).unwrap();
        assert_eq!(q.metric, Metric::Pearson);
        assert!(q.unattainable.is_empty());
    }
}
