//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MSCANCKP"
//! version    u32       currently 1
//! kind       u32 length + UTF-8 bytes   model type, e.g. "unet"
//! config     u32 length + UTF-8 JSON    the model's configuration
//! count      u32       number of arrays
//! per array:
//!   name     u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     ndim x u64
//!   values   product(dims) x f32, row-major
//! ```
//!
//! Arrays appear in the model's parameter order, batch-norm running
//! statistics included. Values are stored as 32-bit floats, so a reloaded
//! model differs from the in-memory one by rounding; every consumer works from
//! the reloaded copy.

use std::fs;
use std::path::{Path, PathBuf};

use mscan_core::encoder::{EncoderConfig, EncoderModel};
use mscan_core::localization::{CanalCenterConfig, CanalCenterNet, Unet, UnetConfig};
use mscan_core::multiview::{MScanModel, MultiViewConfig};
use mscan_core::nn::{ParamStore, Tensor};
use mscan_core::sliceselect::{SliceScorer, SliceScorerConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const MAGIC: &[u8; 8] = b"MSCANCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: truncated or corrupt checkpoint")]
    Truncated { path: PathBuf },
    #[error("{path}: expected a {expected} checkpoint, found {found}")]
    WrongKind { path: PathBuf, expected: &'static str, found: String },
    #[error("{path}: {reason}")]
    Mismatch { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A named array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub arrays: Vec<StoredArray>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend((s.len() as u32).to_le_bytes());
    buf.extend(s.as_bytes());
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: String, store: &ParamStore) -> Self {
        let arrays = store
            .entries()
            .iter()
            .map(|e| StoredArray {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                values: e.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self { kind: kind.to_string(), config, arrays }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        put_str(&mut buf, &self.kind);
        put_str(&mut buf, &self.config);
        buf.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut buf, &a.name);
            buf.extend((a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                buf.extend((d as u64).to_le_bytes());
            }
            for v in &a.values {
                buf.extend(v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = || CheckpointError::Truncated { path: path.to_path_buf() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(truncated)? != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(CheckpointError::Version { path: path.to_path_buf(), version });
        }
        let kind = r.string().ok_or_else(truncated)?;
        let config = r.string().ok_or_else(truncated)?;
        let count = r.u32().ok_or_else(truncated)? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string().ok_or_else(truncated)?;
            let ndim = r.u32().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let d = r.u64().ok_or_else(truncated)?;
                shape.push(usize::try_from(d).map_err(|_| truncated())?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            arrays.push(StoredArray { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(truncated());
        }
        Ok(Self { kind, config, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies every stored array into `store`. Names and shapes must match
    /// the store exactly, in any order.
    pub fn restore_into(&self, store: &mut ParamStore, path: &Path) -> Result<()> {
        let mismatch = |reason: String| CheckpointError::Mismatch { path: path.to_path_buf(), reason };
        if self.arrays.len() != store.len() {
            return Err(mismatch(format!(
                "checkpoint has {} arrays, model expects {}",
                self.arrays.len(),
                store.len()
            )));
        }
        for a in &self.arrays {
            let id = store.find(&a.name).ok_or_else(|| mismatch(format!("unknown array {}", a.name)))?;
            if store.get(id).shape() != a.shape.as_slice() {
                return Err(mismatch(format!(
                    "array {} has shape {:?}, model expects {:?}",
                    a.name,
                    a.shape,
                    store.get(id).shape()
                )));
            }
            let values = a.values.iter().map(|&v| v as f64).collect();
            *store.get_mut(id) = Tensor::from_vec(&a.shape, values).map_err(|e| mismatch(e.to_string()))?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// A model that can be written to and rebuilt from a checkpoint.
pub trait Persist: Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn config_value(&self) -> Self::Config;
    fn build(config: Self::Config) -> std::result::Result<Self, String>;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

macro_rules! persist {
    ($ty:ty, $cfg:ty, $kind:literal, |$c:ident| $build:expr) => {
        impl Persist for $ty {
            const KIND: &'static str = $kind;
            type Config = $cfg;

            fn config_value(&self) -> $cfg {
                self.config().clone()
            }

            fn build($c: $cfg) -> std::result::Result<Self, String> {
                $build
            }

            fn store(&self) -> &ParamStore {
                self.params()
            }

            fn store_mut(&mut self) -> &mut ParamStore {
                self.params_mut()
            }
        }
    };
}

persist!(Unet, UnetConfig, "unet", |c| Ok(Unet::new(c, 0)));
persist!(SliceScorer, SliceScorerConfig, "slice_scorer", |c| Ok(SliceScorer::new(c, 0)));
persist!(CanalCenterNet, CanalCenterConfig, "canal_center", |c| Ok(CanalCenterNet::new(c, 0)));
persist!(EncoderModel, EncoderConfig, "encoder", |c| Ok(EncoderModel::new(c, 0)));
persist!(MScanModel, MultiViewConfig, "multiview", |c| MScanModel::new(c, 0).map_err(|e| e.to_string()));

pub fn save_model<M: Persist>(path: &Path, model: &M) -> Result<()> {
    let config = serde_json::to_string(&model.config_value()).expect("configs serialize");
    Checkpoint::from_store(M::KIND, config, model.store()).write(path)
}

pub fn load_model<M: Persist>(path: &Path) -> Result<M> {
    let ck = Checkpoint::read(path)?;
    if ck.kind != M::KIND {
        return Err(CheckpointError::WrongKind { path: path.to_path_buf(), expected: M::KIND, found: ck.kind });
    }
    let mismatch = |reason: String| CheckpointError::Mismatch { path: path.to_path_buf(), reason };
    let config: M::Config = serde_json::from_str(&ck.config).map_err(|e| mismatch(e.to_string()))?;
    let mut model = M::build(config).map_err(mismatch)?;
    ck.restore_into(model.store_mut(), path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint {
            kind: "x".into(),
            config: "{}".into(),
            arrays: vec![StoredArray { name: "w".into(), shape: vec![2, 1], values: vec![1.5, -2.0] }],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("t")).unwrap(), ck);
        for cut in [0, 9, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("t")).is_err());
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let mut bytes = Checkpoint { kind: "x".into(), config: "{}".into(), arrays: vec![] }.to_bytes();
        bytes[0] = b'N';
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("t")), Err(CheckpointError::BadMagic { .. })));
    }
}
