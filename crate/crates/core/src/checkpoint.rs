//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"MRGLCKPT"
//! version    u32       1
//! manifest   u64 length + UTF-8 JSON
//! payload    p × f32   parameter values in index order
//! ```
//!
//! The manifest carries the model spec, the init seed, the tensor index and
//! a SHA-256 of the payload bytes. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{ParamIndex, ParamVector, TensorEntry};
use crate::model::ModelSpec;

const MAGIC: &[u8; 8] = b"MRGLCKPT";
const VERSION: u32 = 1;

/// Where a merged checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub lambda: Option<f32>,
    pub per_task_lambda: Option<Vec<f32>>,
    pub density: Option<f32>,
    /// Payload hashes of the base and every input checkpoint, in order.
    pub input_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: ParamVector,
    pub provenance: Option<Provenance>,
}

/// SHA-256 of the little-endian payload, hex encoded.
pub fn content_hash(params: &ParamVector) -> String {
    hex::encode(Sha256::digest(params.to_le_bytes()))
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, seed: u64, params: ParamVector) -> Result<Self> {
        spec.check_params(&params)?;
        Ok(Self {
            spec,
            seed,
            params,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.params)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            spec: self.spec.clone(),
            seed: self.seed,
            tensors: self.params.index().entries().to_vec(),
            content_hash: self.content_hash(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let payload = self.params.to_le_bytes();
        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let index = ParamIndex::from_entries(manifest.tensors)?;
        let params = ParamVector::new(values, index)?;
        if content_hash(&params) != manifest.content_hash {
            return Err(bad("content hash does not match payload"));
        }
        let mut ckpt = Checkpoint::new(manifest.spec, manifest.seed, params)?;
        ckpt.provenance = manifest.provenance;
        Ok(ckpt)
    }

    /// Writes via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes `bytes` through a temporary sibling and a rename, creating parent
/// directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation};
    use proptest::prelude::*;

    fn ckpt(seed: u64) -> Checkpoint {
        let spec = ModelSpec::new(vec![3, 5, 2], Activation::Relu).unwrap();
        let params = init_params(&spec, seed);
        Checkpoint::new(spec, seed, params).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ckpt(4).with_provenance(Provenance {
            method: "task_arithmetic".into(),
            lambda: Some(0.3),
            per_task_lambda: None,
            density: None,
            input_hashes: vec!["ab".into()],
        });
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params.to_le_bytes(), c.params.to_le_bytes());
        assert_eq!(back, c);
        assert_eq!(fs::read(&path).unwrap(), back.to_bytes());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut bytes = ckpt(1).to_bytes();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("hash"), "{err}");
        assert!(Checkpoint::from_bytes(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn spec_and_params_must_agree() {
        let spec = ModelSpec::new(vec![3, 4, 2], Activation::Relu).unwrap();
        let other = init_params(&ModelSpec::new(vec![3, 5, 2], Activation::Relu).unwrap(), 0);
        assert!(Checkpoint::new(spec, 0, other).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_finite_values_round_trip(
            values in prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO, 17)
        ) {
            let spec = ModelSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap();
            let params = ParamVector::new(values, spec.param_index()).unwrap();
            let c = Checkpoint::new(spec, 9, params).unwrap();
            let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.params.to_le_bytes(), c.params.to_le_bytes());
        }
    }
}
