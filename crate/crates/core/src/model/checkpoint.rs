//! Self-describing checkpoint container.
//!
//! Layout: the format tag and a newline, a little-endian `u64` header
//! length, a JSON header, then every tensor's data as little-endian `f64`
//! in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::config::ArchConfig;
use super::params::ModelParams;
use super::plan::ArchPlan;
use super::ModelError;

pub const FORMAT_TAG: &str = "poseadapt-ckpt/1";

/// Learnable log-variance weights of the translation and rotation losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScales {
    pub s_x: f64,
    pub s_q: f64,
}

impl Default for LossScales {
    fn default() -> Self {
        Self { s_x: 0.0, s_q: -3.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ArchConfig,
    pub params: ModelParams,
    pub scales: LossScales,
    /// Free-form provenance (epoch, seed, mode, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ArchConfig,
    scales: LossScales,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: ArchConfig, params: ModelParams, scales: LossScales) -> Self {
        Self {
            config,
            params,
            scales,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = Header {
            format: FORMAT_TAG.into(),
            config: self.config.clone(),
            scales: self.scales,
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 32 + self.params.num_scalars() * 8);
        out.extend_from_slice(FORMAT_TAG.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ModelError> {
        let tag = FORMAT_TAG.as_bytes();
        let Some(nl) = bytes.iter().position(|b| *b == b'\n') else {
            return Err(bad("missing format tag"));
        };
        if &bytes[..nl] != tag {
            return Err(bad(format!(
                "unsupported format {:?}, expected {FORMAT_TAG}",
                String::from_utf8_lossy(&bytes[..nl.min(64)])
            )));
        }
        bytes = &bytes[nl + 1..];
        let mut len = [0u8; 8];
        bytes.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[..len]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(bad(format!("header format {:?}", header.format)));
        }
        bytes = &bytes[len..];
        let mut params = ModelParams::default();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if bytes.len() < n * 8 {
                return Err(bad(format!("truncated data for {}", entry.name)));
            }
            let data = bytes[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            bytes = &bytes[n * 8..];
            let t = Tensor::new(entry.shape, data)?;
            params.insert(entry.name, t);
        }
        if !bytes.is_empty() {
            return Err(bad(format!("{} trailing bytes", bytes.len())));
        }
        let plan = ArchPlan::resolve(&header.config)?;
        params.validate(&plan)?;
        Ok(Self {
            config: header.config,
            params,
            scales: header.scales,
            meta: header.meta,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Network;

    #[test]
    fn round_trip_is_bitwise() {
        let net = Network::new(ArchConfig::desk_small()).unwrap();
        let mut ck = Checkpoint::new(net.config().clone(), net.init_params(5), LossScales { s_x: 0.25, s_q: -2.75 });
        ck.meta.insert("epoch".into(), "3".into());
        let bytes = ck.to_bytes().unwrap();
        assert!(bytes.starts_with(b"poseadapt-ckpt/1\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(Checkpoint::from_bytes(b"something-else/1\n").is_err());
        let net = Network::new(ArchConfig::desk_small()).unwrap();
        let ck = Checkpoint::new(net.config().clone(), net.init_params(0), LossScales::default());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
