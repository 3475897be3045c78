//! Checkpoint container.
//!
//! Layout: `b"TPIE"`, `u32` format version, `u64` header length (both little
//! endian), a JSON header, then the little-endian `f32` data of every tensor
//! in header order. Offsets in the header are relative to the start of the
//! data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::LatentStats;
use crate::error::{Error, Result};
use crate::io;
use crate::params::ParamStore;
use crate::pipeline::{TrainConfig, TrainState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPIE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    config: TrainConfig,
    seed: u64,
    latent_stats: LatentStats,
    train_state: Option<TrainState>,
}

/// Named `f32` tensors plus the configuration and training state they
/// belong to. Parameter names carry a `registration/` or `diffusion/`
/// prefix; optimizer moments live under `optim/`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    pub latent_stats: LatentStats,
    pub train_state: Option<TrainState>,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            let bytes = 4 * t.numel() as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            config: self.config.clone(),
            seed: self.seed,
            latent_stats: self.latent_stats,
            train_state: self.train_state.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing TPIE magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];

        let mut spans: Vec<(u64, u64)> = header.tensors.iter().map(|e| (e.offset, e.bytes)).collect();
        spans.sort_unstable();
        let mut end = 0u64;
        for &(off, len) in &spans {
            if off < end {
                return Err(bad("overlapping tensor data"));
            }
            end = off.checked_add(len).ok_or_else(|| bad("tensor span overflows"))?;
        }
        if end > data.len() as u64 {
            return Err(bad("tensor data extends past end of file"));
        }

        let mut tensors = ParamStore::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.bytes != 4 * numel as u64 {
                return Err(Error::Checkpoint(format!("tensor `{}` size does not match its shape", e.name)));
            }
            let raw = &data[e.offset as usize..(e.offset + e.bytes) as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            latent_stats: header.latent_stats,
            train_state: header.train_state,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
