//! Linear multi-objective reward head fitted on frozen features.
//!
//! Each objective column is an independent ridge regression over only the
//! records where that objective's rating is present:
//!
//! ```text
//! w_j = argmin  sum_{i : mask_ij} (w^T f_i - r_ij)^2 + ridge * |w|^2
//! ```
//!
//! solved in closed form through an LDL^T factorization of the regularized
//! normal equations, followed by one step of iterative refinement.

use std::path::Path;

use rayon::prelude::*;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::feature_store::{check_names, FeatureStore, RatedRecord};

pub const HEAD_MAGIC: [u8; 4] = *b"AHD1";
pub const HEAD_VERSION: u32 = 1;
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// The `d x k` regression layer, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardHead {
    d: usize,
    k: usize,
    w: Vec<f64>,
    pub objective_names: Vec<String>,
    pub ridge: f64,
}

impl RewardHead {
    pub fn from_columns(columns: Vec<Vec<f64>>, objective_names: Vec<String>, ridge: f64) -> Result<Self> {
        let k = columns.len();
        if objective_names.len() != k {
            return Err(Error::ObjectiveCount {
                expected: k,
                actual: objective_names.len(),
            });
        }
        check_names(&objective_names)?;
        let d = columns.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::InvalidArgument("head needs d >= 1 and k >= 1".into()));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != d) {
            return Err(Error::dim("head column", d, c.len()));
        }
        let w: Vec<f64> = columns.into_iter().flatten().collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head weights".into()));
        }
        Ok(Self {
            d,
            k,
            w,
            objective_names,
            ridge,
        })
    }

    pub fn zeros(d: usize, objective_names: Vec<String>) -> Result<Self> {
        let k = objective_names.len();
        Self::from_columns(vec![vec![0.0; d]; k], objective_names, 0.0)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.w[j * self.d..(j + 1) * self.d]
    }

    /// Weight at feature row `i`, objective column `j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[j * self.d + i]
    }

    pub fn objective_index(&self, name: &str) -> Option<usize> {
        self.objective_names.iter().position(|n| n == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(32 + 8 * self.w.len());
        w.bytes(&HEAD_MAGIC);
        w.u32(HEAD_VERSION);
        w.len_u32(self.d, "feature dimension")?;
        w.len_u32(self.k, "objective count")?;
        w.f64(self.ridge);
        for name in &self.objective_names {
            w.string(name)?;
        }
        w.f64s(&self.w);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(HEAD_MAGIC)?;
        let version = r.u32()?;
        if version != HEAD_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "reward head",
                found: version,
            });
        }
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let ridge = r.f64()?;
        let names = (0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let w = r.f64s(d.checked_mul(k).ok_or_else(|| Error::Corrupt("d * k overflows".into()))?)?;
        r.finish()?;
        let columns = if d == 0 { vec![] } else { w.chunks(d).map(<[f64]>::to_vec).collect() };
        Self::from_columns(columns, names, ridge)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `w^T feature`: one predicted reward per objective.
pub fn predict_rewards(head: &RewardHead, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != head.d {
        return Err(Error::dim("feature passed to reward head", head.d, feature.len()));
    }
    Ok((0..head.k).map(|j| dot(head.column(j), feature)).collect())
}

/// Predicted rewards for every record of a rated store, one row per record.
pub fn predict_store(head: &RewardHead, store: &FeatureStore) -> Result<Vec<Vec<f64>>> {
    store
        .rated_records()?
        .par_iter()
        .map(|r| predict_rewards(head, &r.feature))
        .collect()
}

/// Fits every objective column of the head on the present ratings of `store`.
pub fn fit_head(store: &FeatureStore, ridge: f64) -> Result<RewardHead> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let records = store.rated_records()?;
    let k = store.k();
    if k == 0 {
        return Err(Error::InvalidArgument("store has no objectives to fit".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.feature.len() != store.d {
            return Err(Error::dim(format!("record {i} feature"), store.d, r.feature.len()));
        }
        if let Some(j) = r.feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("record {i} feature[{j}]")));
        }
    }
    let counts = store.present_counts();
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::NoPresentRatings(store.objective_names[j].clone()));
    }

    let columns = (0..k)
        .into_par_iter()
        .map(|j| fit_column(records, store.d, j, ridge).ok_or_else(|| Error::Singular(store.objective_names[j].clone())))
        .collect::<Result<Vec<_>>>()?;
    RewardHead::from_columns(columns, store.objective_names.clone(), ridge)
}

/// Regularized normal equations `(F^T F + ridge I) w = F^T r` restricted to
/// records with objective `j` present. `a` is dense row-major `d x d`.
fn normal_equations(records: &[RatedRecord], d: usize, j: usize, ridge: f64) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for r in records.iter().filter(|r| r.mask[j]) {
        let y = r.rating[j];
        for (p, &fp) in r.feature.iter().enumerate() {
            b[p] += fp * y;
            let row = &mut a[p * d..p * d + p + 1];
            for (q, slot) in row.iter_mut().enumerate() {
                *slot += fp * r.feature[q];
            }
        }
    }
    for p in 0..d {
        a[p * d + p] += ridge;
        for q in 0..p {
            a[q * d + p] = a[p * d + q];
        }
    }
    (a, b)
}

/// Max-norm of `(F^T F + ridge I) w - F^T r` for objective `j`.
pub fn normal_equation_residual(store: &FeatureStore, head: &RewardHead, j: usize) -> Result<f64> {
    let records = store.rated_records()?;
    let (a, b) = normal_equations(records, store.d, j, head.ridge);
    let w = head.column(j);
    Ok((0..store.d)
        .map(|p| (dot(&a[p * store.d..(p + 1) * store.d], w) - b[p]).abs())
        .fold(0.0, f64::max))
}

fn fit_column(records: &[RatedRecord], d: usize, j: usize, ridge: f64) -> Option<Vec<f64>> {
    let (a, b) = normal_equations(records, d, j, ridge);
    let f = Ldl::factor(&a, d)?;
    let mut w = f.solve(&b);
    let residual: Vec<f64> = (0..d).map(|p| b[p] - dot(&a[p * d..(p + 1) * d], &w)).collect();
    for (wi, ci) in w.iter_mut().zip(f.solve(&residual)) {
        *wi += ci;
    }
    w.iter().all(|v| v.is_finite()).then_some(w)
}

/// Square-root-free Cholesky `A = L D L^T` of a symmetric positive definite
/// row-major matrix; `L` has a unit diagonal that is not stored.
struct Ldl {
    n: usize,
    l: Vec<f64>,
    diag: Vec<f64>,
}

impl Ldl {
    fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut l = vec![0.0; n * n];
        let mut diag = vec![0.0; n];
        for i in 0..n {
            for j in 0..i {
                let s: f64 = (0..j).map(|p| l[i * n + p] * l[j * n + p] * diag[p]).sum();
                l[i * n + j] = (a[i * n + j] - s) / diag[j];
            }
            let s: f64 = (0..i).map(|p| l[i * n + p] * l[i * n + p] * diag[p]).sum();
            let pivot = a[i * n + i] - s;
            if !(pivot > 0.0 && pivot.is_finite()) {
                return None;
            }
            diag[i] = pivot;
        }
        Some(Self { n, l, diag })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = b[i] - dot(&self.l[i * n..i * n + i], &y[..i]);
        }
        for (yi, di) in y.iter_mut().zip(&self.diag) {
            *yi /= di;
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|p| self.l[p * n + i] * y[p]).sum();
            y[i] -= s;
        }
        y
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
