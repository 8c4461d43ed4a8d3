//! Feature/rating stores and their on-disk container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! 0..4    magic "AFS1"
//! 4..8    version (u32, = 1)
//! 8..12   d (u32)
//! 12..16  k (u32)
//! 16..24  n (u64)
//! 24      record kind (0 = rated, 1 = pair)
//! ...     k x (u32 length + UTF-8 objective name)
//! ...     n records
//! ```
//!
//! A rated record is `d` feature floats, `k` rating floats and `ceil(k/8)`
//! mask bytes (LSB-first, bit set = rating present). Absent rating slots are
//! always written as `0.0`. A pair record is the prompt, chosen and rejected
//! feature vectors, `3 * d` floats.

mod ingest;

pub use ingest::{
    ingest_rows, merge_stores, normalize_rating, parse_manifest, parse_pair_rows,
    parse_rating_rows, DatasetManifest, RatingRow, RatingScale,
};

use std::collections::HashSet;
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const STORE_MAGIC: [u8; 4] = *b"AFS1";
pub const STORE_VERSION: u32 = 1;
const FIXED_HEADER_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    Rated = 0,
    Pair = 1,
}

impl RecordKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(RecordKind::Rated),
            1 => Ok(RecordKind::Pair),
            t => Err(Error::Corrupt(format!("unknown record kind tag {t}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            RecordKind::Rated => "rated",
            RecordKind::Pair => "pair",
        }
    }
}

/// Decoded container header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub d: usize,
    pub k: usize,
    pub n: u64,
    pub kind: RecordKind,
    pub objective_names: Vec<String>,
}

/// One response feature (of prompt + response) with a sparse rating vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RatedRecord {
    pub feature: Vec<f64>,
    pub rating: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RatedRecord {
    /// Builds a record from optional ratings; `None` becomes an absent slot.
    pub fn from_options(feature: Vec<f64>, ratings: &[Option<f64>]) -> Self {
        let rating = ratings.iter().map(|r| r.unwrap_or(0.0)).collect();
        let mask = ratings.iter().map(Option::is_some).collect();
        Self {
            feature,
            rating,
            mask,
        }
    }

    pub fn present(&self, j: usize) -> Option<f64> {
        self.mask[j].then(|| self.rating[j])
    }
}

/// A preference pair: prompt feature, then chosen and rejected response features.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub prompt: Vec<f64>,
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Rated(Vec<RatedRecord>),
    Pair(Vec<PairRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Rated(r) => r.len(),
            Records::Pair(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> RecordKind {
        match self {
            Records::Rated(_) => RecordKind::Rated,
            Records::Pair(_) => RecordKind::Pair,
        }
    }
}

/// An in-memory feature store of either record kind.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub d: usize,
    pub objective_names: Vec<String>,
    pub records: Records,
}

impl FeatureStore {
    pub fn rated(d: usize, objective_names: Vec<String>, records: Vec<RatedRecord>) -> Self {
        Self {
            d,
            objective_names,
            records: Records::Rated(records),
        }
    }

    pub fn pairs(d: usize, records: Vec<PairRecord>) -> Self {
        Self {
            d,
            objective_names: Vec::new(),
            records: Records::Pair(records),
        }
    }

    pub fn k(&self) -> usize {
        self.objective_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            version: STORE_VERSION,
            d: self.d,
            k: self.k(),
            n: self.len() as u64,
            kind: self.records.kind(),
            objective_names: self.objective_names.clone(),
        }
    }

    pub fn rated_records(&self) -> Result<&[RatedRecord]> {
        match &self.records {
            Records::Rated(r) => Ok(r),
            Records::Pair(_) => Err(Error::WrongKind { expected: "rated" }),
        }
    }

    pub fn pair_records(&self) -> Result<&[PairRecord]> {
        match &self.records {
            Records::Pair(p) => Ok(p),
            Records::Rated(_) => Err(Error::WrongKind { expected: "pair" }),
        }
    }

    /// Index of an objective by name.
    pub fn objective_index(&self, name: &str) -> Option<usize> {
        self.objective_names.iter().position(|n| n == name)
    }

    /// Number of present ratings per objective.
    pub fn present_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        if let Records::Rated(records) = &self.records {
            for r in records {
                for (c, &m) in counts.iter_mut().zip(&r.mask) {
                    *c += usize::from(m);
                }
            }
        }
        counts
    }

    /// Checks the header and per-record invariants.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("feature dimension d must be >= 1".into()));
        }
        check_names(&self.objective_names)?;
        let k = self.k();
        match &self.records {
            Records::Rated(records) => {
                for (i, r) in records.iter().enumerate() {
                    if r.feature.len() != self.d {
                        return Err(Error::dim(format!("record {i} feature"), self.d, r.feature.len()));
                    }
                    if r.rating.len() != k {
                        return Err(Error::dim(format!("record {i} rating"), k, r.rating.len()));
                    }
                    if r.mask.len() != k {
                        return Err(Error::dim(format!("record {i} mask"), k, r.mask.len()));
                    }
                    for j in 0..k {
                        if let Some(v) = r.present(j) {
                            if !(0.0..=1.0).contains(&v) {
                                return Err(Error::OutOfRange {
                                    objective: self.objective_names[j].clone(),
                                    value: v,
                                    min: 0.0,
                                    max: 1.0,
                                });
                            }
                        }
                    }
                }
            }
            Records::Pair(records) => {
                for (i, p) in records.iter().enumerate() {
                    for (what, v) in [("prompt", &p.prompt), ("chosen", &p.chosen), ("rejected", &p.rejected)] {
                        if v.len() != self.d {
                            return Err(Error::dim(format!("pair {i} {what}"), self.d, v.len()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn record_len(&self) -> usize {
        record_len(self.records.kind(), self.d, self.k())
    }

    /// Encodes the store into its container bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::with_capacity(FIXED_HEADER_LEN + self.len() * self.record_len());
        w.bytes(&STORE_MAGIC);
        w.u32(STORE_VERSION);
        w.len_u32(self.d, "feature dimension")?;
        w.len_u32(self.k(), "objective count")?;
        w.u64(self.len() as u64);
        w.u8(self.records.kind() as u8);
        for name in &self.objective_names {
            w.string(name)?;
        }
        match &self.records {
            Records::Rated(records) => {
                for r in records {
                    w.f64s(&r.feature);
                    for (&v, &m) in r.rating.iter().zip(&r.mask) {
                        w.f64(if m { v } else { 0.0 });
                    }
                    w.bytes(&pack_mask(&r.mask));
                }
            }
            Records::Pair(records) => {
                for p in records {
                    w.f64s(&p.prompt);
                    w.f64s(&p.chosen);
                    w.f64s(&p.rejected);
                }
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STORE_MAGIC)?;
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "feature store",
                found: version,
            });
        }
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let n = r.u64()?;
        let kind = RecordKind::from_tag(r.u8()?)?;
        if d == 0 {
            return Err(Error::Corrupt("feature dimension d = 0".into()));
        }
        let mut names = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            names.push(r.string()?);
        }
        check_names(&names)?;

        let rec_len = record_len(kind, d, k) as u128;
        let expected = r.position() as u128 + rec_len * n as u128;
        if expected != bytes.len() as u128 {
            if expected > bytes.len() as u128 {
                return Err(Error::Truncated {
                    expected: u64::try_from(expected).unwrap_or(u64::MAX),
                    actual: bytes.len() as u64,
                });
            }
            return Err(Error::Corrupt(format!(
                "{} bytes after the last of {n} {} records",
                bytes.len() as u128 - expected,
                kind.name()
            )));
        }

        let n = n as usize;
        let records = match kind {
            RecordKind::Rated => {
                let mask_len = k.div_ceil(8);
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let feature = r.f64s(d)?;
                    let rating = r.f64s(k)?;
                    let mask = unpack_mask(r.take(mask_len)?, k)
                        .ok_or_else(|| Error::Corrupt(format!("record {i}: mask padding bits set")))?;
                    out.push(RatedRecord {
                        feature,
                        rating,
                        mask,
                    });
                }
                Records::Rated(out)
            }
            RecordKind::Pair => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    out.push(PairRecord {
                        prompt: r.f64s(d)?,
                        chosen: r.f64s(d)?,
                        rejected: r.f64s(d)?,
                    });
                }
                Records::Pair(out)
            }
        };
        r.finish()?;
        Ok(Self {
            d,
            objective_names: names,
            records,
        })
    }
}

fn record_len(kind: RecordKind, d: usize, k: usize) -> usize {
    match kind {
        RecordKind::Rated => 8 * d + 8 * k + k.div_ceil(8),
        RecordKind::Pair => 3 * 8 * d,
    }
}

pub(crate) fn check_names(names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateObjective(name.clone()));
        }
    }
    Ok(())
}

fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (j, &m) in mask.iter().enumerate() {
        if m {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

fn unpack_mask(bytes: &[u8], k: usize) -> Option<Vec<bool>> {
    let mask: Vec<bool> = (0..k).map(|j| bytes[j / 8] & (1 << (j % 8)) != 0).collect();
    let padding_clear = (k..bytes.len() * 8).all(|j| bytes[j / 8] & (1 << (j % 8)) == 0);
    padding_clear.then_some(mask)
}

/// Writes a store to `path` in the `AFS1` container format.
///
/// `header` must describe `records`: the record kind, `d`, `k` and `n` are all
/// checked before anything touches the filesystem.
pub fn write_store(header: &StoreHeader, records: Records, path: impl AsRef<Path>) -> Result<()> {
    if header.objective_names.len() != header.k {
        return Err(Error::ObjectiveCount {
            expected: header.k,
            actual: header.objective_names.len(),
        });
    }
    if header.kind != records.kind() {
        return Err(Error::WrongKind {
            expected: header.kind.name(),
        });
    }
    if header.n != records.len() as u64 {
        return Err(Error::dim("record count", header.n as usize, records.len()));
    }
    let store = FeatureStore {
        d: header.d,
        objective_names: header.objective_names.clone(),
        records,
    };
    save_store(&store, path)
}

pub fn save_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let bytes = store.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads an `AFS1` container, returning its header and records.
pub fn read_store(path: impl AsRef<Path>) -> Result<(StoreHeader, Records)> {
    let store = load_store(path)?;
    Ok((store.header(), store.records))
}

pub fn load_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let bytes = std::fs::read(path)?;
    FeatureStore::from_bytes(&bytes)
}
