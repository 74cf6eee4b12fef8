//! Checkpoint container: a magic string, a format version, a JSON header
//! describing the run and the tensor layout, then every tensor as raw
//! little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, Network, Parameters};
use crate::train::Hyperparams;

const MAGIC: &[u8; 8] = b"EQPCKPT\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureConfig,
    hyperparams: Hyperparams,
    norm: Option<NormStats>,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: ArchitectureConfig,
    pub hyperparams: Hyperparams,
    pub params: Parameters,
    pub norm: Option<NormStats>,
    pub epoch: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "checkpoint",
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new(
        architecture: ArchitectureConfig,
        hyperparams: Hyperparams,
        params: Parameters,
        norm: Option<NormStats>,
        epoch: usize,
    ) -> Self {
        Self {
            architecture,
            hyperparams,
            params,
            norm,
            epoch,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.params.named();
        let header = Header {
            architecture: self.architecture.clone(),
            hyperparams: self.hyperparams.clone(),
            norm: self.norm.clone(),
            epoch: self.epoch,
            tensors: named
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out =
            Vec::with_capacity(MAGIC.len() + 12 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing magic string"));
        }
        let mut at = MAGIC.len();
        let version = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        at += 4;
        let len = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
        at += 8;
        let json = bytes
            .get(at..at + len)
            .ok_or_else(|| bad("truncated header"))?;
        at += len;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
        let net = Network::new(header.architecture.clone())?;
        let mut params = net.init_params(0);
        let slots = params.named_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad(format!(
                "architecture has {} tensors, file lists {}",
                slots.len(),
                header.tensors.len()
            )));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(bad(format!(
                    "tensor `{}` {:?} does not match `{name}`",
                    entry.name, entry.shape
                )));
            }
            let n = slot.len();
            let raw = bytes
                .get(at..at + 8 * n)
                .ok_or_else(|| bad(format!("truncated data for `{name}`")))?;
            for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter values"));
        }
        Ok(Self {
            architecture: header.architecture,
            hyperparams: header.hyperparams,
            params,
            norm: header.norm,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
