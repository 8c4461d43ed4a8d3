//! A head, debias profile and gate packaged as one versioned container.
//!
//! Layout: magic `ABN1`, version (u32), then four sections each prefixed by a
//! u64 byte length: the `AHD1` head, the profile JSON, the `AGT1` gate and
//! the metadata JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::debias::DebiasProfile;
use crate::error::{Error, Result};
use crate::eval::{Gate, Scorer};
use crate::gating::GatingNetwork;
use crate::regression_head::RewardHead;

pub const BUNDLE_MAGIC: [u8; 4] = *b"ABN1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    /// Config digests keyed by stage name.
    pub digests: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub head: RewardHead,
    pub profile: DebiasProfile,
    pub gate: GatingNetwork,
    pub metadata: BundleMetadata,
}

impl ModelBundle {
    pub fn new(head: RewardHead, profile: DebiasProfile, gate: GatingNetwork, metadata: BundleMetadata) -> Result<Self> {
        let bundle = Self {
            head,
            profile,
            gate,
            metadata,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks that the three components agree on `d` and `k`.
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        let k = self.head.k();
        if self.profile.k() != k {
            return Err(Error::dim("debias profile objectives vs head", k, self.profile.k()));
        }
        if self.gate.output_dim() != k {
            return Err(Error::dim("gate output vs head objectives", k, self.gate.output_dim()));
        }
        if self.gate.input_dim() != self.head.d() {
            return Err(Error::dim("gate input vs head feature dimension", self.head.d(), self.gate.input_dim()));
        }
        Ok(())
    }

    pub fn scorer(&self) -> Result<Scorer> {
        Scorer::new(self.head.clone(), self.profile.clone(), Gate::Network(self.gate.clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let sections = [
            self.head.to_bytes()?,
            serde_json::to_vec(&self.profile)?,
            self.gate.to_bytes()?,
            serde_json::to_vec(&self.metadata)?,
        ];
        let mut w = ByteWriter::with_capacity(8 + sections.iter().map(|s| 8 + s.len()).sum::<usize>());
        w.bytes(&BUNDLE_MAGIC);
        w.u32(BUNDLE_VERSION);
        for s in &sections {
            w.u64(s.len() as u64);
            w.bytes(s);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(BUNDLE_MAGIC)?;
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "model bundle",
                found: version,
            });
        }
        let mut section = || -> Result<&[u8]> {
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("section length".into()))?;
            r.take(len)
        };
        let head = RewardHead::from_bytes(section()?)?;
        let profile: DebiasProfile = serde_json::from_slice(section()?)?;
        let gate = GatingNetwork::from_bytes(section()?)?;
        let metadata: BundleMetadata = serde_json::from_slice(section()?)?;
        r.finish()?;
        Self::new(head, profile, gate, metadata)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
