//! Rating normalization, dataset manifests and merging of rated stores.

use serde::{Deserialize, Serialize};

use super::{check_names, FeatureStore, PairRecord, RatedRecord};
use crate::error::{Error, Result};

/// Raw rating range of one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingScale {
    pub objective_name: String,
    pub min_raw: f64,
    pub max_raw: f64,
}

impl RatingScale {
    pub fn new(objective_name: impl Into<String>, min_raw: f64, max_raw: f64) -> Result<Self> {
        let objective_name = objective_name.into();
        if !(min_raw.is_finite() && max_raw.is_finite() && max_raw > min_raw) {
            return Err(Error::InvalidArgument(format!(
                "scale for {objective_name:?} needs finite max > min, got [{min_raw}, {max_raw}]"
            )));
        }
        Ok(Self {
            objective_name,
            min_raw,
            max_raw,
        })
    }
}

/// Maps a raw rating affinely onto [0, 1]. Values outside the declared scale
/// are reported, not clamped.
pub fn normalize_rating(raw: f64, scale: &RatingScale) -> Result<f64> {
    if !(scale.min_raw..=scale.max_raw).contains(&raw) {
        return Err(Error::OutOfRange {
            objective: scale.objective_name.clone(),
            value: raw,
            min: scale.min_raw,
            max: scale.max_raw,
        });
    }
    Ok((raw - scale.min_raw) / (scale.max_raw - scale.min_raw))
}

/// One line of the ingestion manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: String,
    pub objectives: Vec<String>,
    pub scales: Vec<[f64; 2]>,
}

impl DatasetManifest {
    pub fn rating_scales(&self) -> Result<Vec<RatingScale>> {
        self.objectives
            .iter()
            .zip(&self.scales)
            .map(|(name, [lo, hi])| RatingScale::new(name.clone(), *lo, *hi))
            .collect()
    }
}

fn json_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn manifest_err(line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        line,
        message: message.into(),
    }
}

/// Parses the JSON-lines ingestion manifest, one dataset per line.
pub fn parse_manifest(text: &str) -> Result<Vec<DatasetManifest>> {
    let mut out: Vec<DatasetManifest> = Vec::new();
    for (line, raw) in json_lines(text) {
        let m: DatasetManifest =
            serde_json::from_str(raw).map_err(|e| manifest_err(line, e.to_string()))?;
        if m.objectives.len() != m.scales.len() {
            return Err(manifest_err(
                line,
                format!(
                    "{} objectives but {} scales",
                    m.objectives.len(),
                    m.scales.len()
                ),
            ));
        }
        check_names(&m.objectives).map_err(|e| manifest_err(line, e.to_string()))?;
        m.rating_scales().map_err(|e| manifest_err(line, e.to_string()))?;
        if out.iter().any(|o| o.dataset == m.dataset) {
            return Err(manifest_err(line, format!("dataset {:?} declared twice", m.dataset)));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Empty("manifest declares no datasets".into()));
    }
    Ok(out)
}

/// One raw ratings row: a response feature and the dataset's raw ratings in
/// manifest order (`null` = missing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRow {
    pub dataset: String,
    pub feature: Vec<f64>,
    pub ratings: Vec<Option<f64>>,
}

pub fn parse_rating_rows(text: &str) -> Result<Vec<RatingRow>> {
    let mut rows = Vec::new();
    for (line, raw) in json_lines(text) {
        let row: RatingRow =
            serde_json::from_str(raw).map_err(|e| manifest_err(line, e.to_string()))?;
        rows.push((line, row));
    }
    if rows.is_empty() {
        return Err(Error::Empty("ratings file has no rows".into()));
    }
    if let Some((line, bad)) = rows.iter().find(|(_, r)| r.feature.len() != rows[0].1.feature.len()) {
        return Err(manifest_err(
            *line,
            format!(
                "feature has {} entries, first row has {}",
                bad.feature.len(),
                rows[0].1.feature.len()
            ),
        ));
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRow {
    prompt: Vec<f64>,
    chosen: Vec<f64>,
    rejected: Vec<f64>,
}

/// Parses JSON-lines pair rows `{"prompt": [..], "chosen": [..], "rejected": [..]}`
/// into a pair store.
pub fn parse_pair_rows(text: &str) -> Result<FeatureStore> {
    let mut records = Vec::new();
    let mut d = None;
    for (line, raw) in json_lines(text) {
        let row: PairRow = serde_json::from_str(raw).map_err(|e| manifest_err(line, e.to_string()))?;
        let dim = *d.get_or_insert(row.prompt.len());
        for (what, v) in [("prompt", &row.prompt), ("chosen", &row.chosen), ("rejected", &row.rejected)] {
            if v.len() != dim {
                return Err(manifest_err(line, format!("{what} has {} entries, expected {dim}", v.len())));
            }
        }
        records.push(PairRecord {
            prompt: row.prompt,
            chosen: row.chosen,
            rejected: row.rejected,
        });
    }
    let d = d.ok_or_else(|| Error::Empty("pairs file has no rows".into()))?;
    let store = FeatureStore::pairs(d, records);
    store.validate()?;
    Ok(store)
}

/// Normalizes raw rows per their dataset's scales and merges the per-dataset
/// stores in manifest order.
pub fn ingest_rows(manifests: &[DatasetManifest], rows: &[RatingRow]) -> Result<FeatureStore> {
    let d = rows
        .first()
        .map(|r| r.feature.len())
        .ok_or_else(|| Error::Empty("ratings file has no rows".into()))?;
    let mut per_dataset: Vec<Vec<RatedRecord>> = vec![Vec::new(); manifests.len()];
    let scales: Vec<Vec<RatingScale>> = manifests
        .iter()
        .map(DatasetManifest::rating_scales)
        .collect::<Result<_>>()?;

    for (i, row) in rows.iter().enumerate() {
        let m = manifests
            .iter()
            .position(|m| m.dataset == row.dataset)
            .ok_or_else(|| Error::InvalidArgument(format!("row {}: unknown dataset {:?}", i + 1, row.dataset)))?;
        if row.ratings.len() != scales[m].len() {
            return Err(Error::dim(format!("row {} ratings", i + 1), scales[m].len(), row.ratings.len()));
        }
        if let Some(j) = row.feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row {} feature[{j}]", i + 1)));
        }
        let normalized = row
            .ratings
            .iter()
            .zip(&scales[m])
            .map(|(raw, scale)| raw.map(|v| normalize_rating(v, scale)).transpose())
            .collect::<Result<Vec<_>>>()?;
        per_dataset[m].push(RatedRecord::from_options(row.feature.clone(), &normalized));
    }

    let stores: Vec<FeatureStore> = manifests
        .iter()
        .zip(per_dataset)
        .map(|(m, records)| FeatureStore::rated(d, m.objectives.clone(), records))
        .collect();
    merge_stores(&stores)
}

/// Concatenates rated stores over the ordered union of their objective names.
///
/// A record's mask covers only the objectives of its source store; objectives
/// declared under the same name in two stores share a column.
pub fn merge_stores(stores: &[FeatureStore]) -> Result<FeatureStore> {
    let first = stores
        .first()
        .ok_or_else(|| Error::Empty("no stores to merge".into()))?;
    let d = first.d;
    let mut names: Vec<String> = Vec::new();
    for s in stores {
        if s.d != d {
            return Err(Error::dim("merged store feature dimension", d, s.d));
        }
        check_names(&s.objective_names)?;
        s.rated_records()?;
        for name in &s.objective_names {
            if !names.contains(name) {
                names.push(name.clone());
            }
        }
    }

    let k = names.len();
    let mut records = Vec::with_capacity(stores.iter().map(FeatureStore::len).sum());
    for s in stores {
        let column: Vec<usize> = s
            .objective_names
            .iter()
            .map(|n| names.iter().position(|m| m == n).expect("name in union"))
            .collect();
        for r in s.rated_records()? {
            let mut rating = vec![0.0; k];
            let mut mask = vec![false; k];
            for (src, &dst) in column.iter().enumerate() {
                if r.mask[src] {
                    rating[dst] = r.rating[src];
                    mask[dst] = true;
                }
            }
            records.push(RatedRecord {
                feature: r.feature.clone(),
                rating,
                mask,
            });
        }
    }
    Ok(FeatureStore::rated(d, names, records))
}
