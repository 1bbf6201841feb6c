//! Versioned binary container for model parameters.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header
//! (architecture, class count, schedule position, layer shapes), raw
//! little-endian f32 weight and bias arrays in layer order, and a trailing
//! SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{Conv2d, ConvShape};
use super::model::{ArchConfig, SegmentationModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FSCSNAP\0";
pub const SNAPSHOT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    class_count: usize,
    step: usize,
    layers: Vec<ConvShape>,
}

/// Immutable serialized model state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSnapshot {
    bytes: Vec<u8>,
}

impl ModelSnapshot {
    pub fn capture(model: &SegmentationModel) -> Self {
        let header = Header {
            arch: model.arch().clone(),
            class_count: model.class_count(),
            step: model.step(),
            layers: model.layers().iter().map(|l| l.shape).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes = Vec::with_capacity(20 + header.len() + model.num_params() * 4 + DIGEST_LEN);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for l in model.layers() {
            for v in l.weight.iter().chain(&l.bias) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        Self { bytes }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let snap = Self { bytes };
        snap.parse()?;
        Ok(snap)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Hex SHA-256 of the full container.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(&self.bytes))
    }

    pub fn step(&self) -> Result<usize> {
        Ok(self.parse()?.0.step)
    }

    pub fn class_count(&self) -> Result<usize> {
        Ok(self.parse()?.0.class_count)
    }

    pub fn restore(&self) -> Result<SegmentationModel> {
        let (header, body) = self.parse()?;
        let mut off = 0;
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let end = off + n * 4;
            if end > body.len() {
                return Err(Error::Snapshot("parameter data truncated".into()));
            }
            let v = body[off..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            off = end;
            Ok(v)
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for shape in &header.layers {
            let weight = take(shape.out_channels * shape.patch_len())?;
            let bias = take(shape.out_channels)?;
            layers.push(Conv2d {
                shape: *shape,
                weight,
                bias,
            });
        }
        if off != body.len() {
            return Err(Error::Snapshot("trailing bytes after parameters".into()));
        }
        SegmentationModel::from_parts(header.arch, header.class_count, header.step, layers)
    }

    fn parse(&self) -> Result<(Header, &[u8])> {
        let b = &self.bytes;
        if b.len() < 20 + DIGEST_LEN || &b[..8] != MAGIC {
            return Err(Error::Snapshot("not a model snapshot".into()));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "snapshot version {version}, this build reads {SNAPSHOT_VERSION}"
            )));
        }
        let (payload, digest) = b.split_at(b.len() - DIGEST_LEN);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Snapshot("checksum mismatch (corrupted snapshot)".into()));
        }
        let hlen = u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")) as usize;
        if 20 + hlen > payload.len() {
            return Err(Error::Snapshot("header length out of range".into()));
        }
        let header: Header = serde_json::from_slice(&payload[20..20 + hlen])
            .map_err(|e| Error::Snapshot(format!("bad header: {e}")))?;
        Ok((header, &payload[20 + hlen..]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes)
    }
}

pub fn snapshot(model: &SegmentationModel) -> ModelSnapshot {
    ModelSnapshot::capture(model)
}

pub fn restore(snapshot: &ModelSnapshot) -> Result<SegmentationModel> {
    snapshot.restore()
}
