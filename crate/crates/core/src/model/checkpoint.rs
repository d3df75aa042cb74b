//! Binary tensor container used for model, adapter-only and optimizer checkpoints.
//!
//! Layout (little-endian): magic `SPQATNSR`, u32 version, u32 metadata length,
//! metadata JSON, u32 tensor count, then per tensor: u32 name length, name,
//! u32 ndim, u64 dims, f64 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, MultimodalModel};
use crate::lora::{LoraAdapterSet, LoraConfig, LoraSite};
use crate::model::nn::LoraPair;

const MAGIC: &[u8; 8] = b"SPQATNSR";
const VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_META: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("corrupt checkpoint {path}: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("checkpoint {path} does not match the model: {msg}")]
    Mismatch { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Metadata JSON plus tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let tmp = path.with_extension("tmp");
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
        self.encode(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    fn encode(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(io::Error::other)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let p = path.display().to_string();
        let file = File::open(path).map_err(|source| CheckpointError::Io {
            path: p.clone(),
            source,
        })?;
        let file_len = file.metadata().map(|m| m.len()).unwrap_or(u64::MAX);
        let mut r = BufReader::new(file);
        Self::decode(&mut r, file_len).map_err(|msg| CheckpointError::Corrupt { path: p, msg })
    }

    fn decode(r: &mut impl Read, file_len: u64) -> Result<Self, String> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err("bad magic bytes".into());
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta_len = read_u32(r)? as usize;
        if meta_len > MAX_META {
            return Err("metadata too large".into());
        }
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| format!("metadata: {e}"))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > MAX_NAME {
                return Err("tensor name too long".into());
            }
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| "tensor name is not utf-8".to_string())?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(format!("{name}: rank {ndim} too large"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| (n as u64).saturating_mul(8) <= file_len)
                .ok_or_else(|| format!("{name}: shape {shape:?} exceeds file size"))?;
            let mut bytes = vec![0u8; numel * 8];
            read_exact(r, &mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(Self { meta, tensors })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), String> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => "truncated file".to_string(),
        _ => e.to_string(),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, String> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, String> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Model,
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    kind: Kind,
    model: ModelConfig,
    lora: Option<LoraConfig>,
    #[serde(default = "yes")]
    lora_enabled: bool,
}

fn yes() -> bool {
    true
}

fn lora_tensors(set: &LoraAdapterSet) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (site, pair) in &set.pairs {
        for (f, m) in [('a', &pair.a), ('b', &pair.b)] {
            out.push(NamedTensor {
                name: site.tensor_name(f),
                shape: m.shape().to_vec(),
                data: m.iter().copied().collect(),
            });
        }
    }
    out
}

/// Writes every parameter (base and adapters) with the model config.
pub fn save_model(model: &MultimodalModel, path: &Path) -> Result<(), CheckpointError> {
    let meta = Meta {
        kind: Kind::Model,
        model: model.config.clone(),
        lora: model.lora.as_ref().map(|s| s.config.clone()),
        lora_enabled: model.lora.as_ref().is_none_or(|s| s.enabled),
    };
    let tensors = model
        .params()
        .into_iter()
        .map(|p| NamedTensor {
            name: p.name,
            shape: p.shape,
            data: p.data.to_vec(),
        })
        .collect();
    TensorFile {
        meta: serde_json::to_value(meta).expect("serializable"),
        tensors,
    }
    .write(path)
}

/// Writes only the adapter tensors; the model config is kept for compatibility checks.
pub fn save_adapters(model: &MultimodalModel, path: &Path) -> Result<(), CheckpointError> {
    let set = model.lora.as_ref().ok_or_else(|| CheckpointError::Mismatch {
        path: path.display().to_string(),
        msg: "model has no adapters to save".into(),
    })?;
    let meta = Meta {
        kind: Kind::Adapter,
        model: model.config.clone(),
        lora: Some(set.config.clone()),
        lora_enabled: set.enabled,
    };
    TensorFile {
        meta: serde_json::to_value(meta).expect("serializable"),
        tensors: lora_tensors(set),
    }
    .write(path)
}

fn parse_meta(file: &TensorFile, path: &Path) -> Result<Meta, CheckpointError> {
    serde_json::from_value(file.meta.clone()).map_err(|e| CheckpointError::Corrupt {
        path: path.display().to_string(),
        msg: format!("metadata: {e}"),
    })
}

fn build_adapter_set(
    cfg: LoraConfig,
    enabled: bool,
    tensors: &[NamedTensor],
    d_model: usize,
    path: &str,
) -> Result<LoraAdapterSet, CheckpointError> {
    let mismatch = |msg: String| CheckpointError::Mismatch {
        path: path.to_string(),
        msg,
    };
    let mut halves: BTreeMap<LoraSite, (Option<Array2<f64>>, Option<Array2<f64>>)> = BTreeMap::new();
    for t in tensors.iter().filter(|t| t.name.starts_with("lora.")) {
        let (site, factor) =
            LoraSite::parse_tensor_name(&t.name).ok_or_else(|| mismatch(format!("bad adapter name {}", t.name)))?;
        let expected = if factor == 'a' {
            [d_model, cfg.rank]
        } else {
            [cfg.rank, d_model]
        };
        if t.shape != expected {
            return Err(mismatch(format!("{}: shape {:?}, expected {:?}", t.name, t.shape, expected)));
        }
        let arr = Array2::from_shape_vec((expected[0], expected[1]), t.data.clone()).expect("shape checked");
        let entry = halves.entry(site).or_default();
        if factor == 'a' {
            entry.0 = Some(arr);
        } else {
            entry.1 = Some(arr);
        }
    }
    let mut pairs = BTreeMap::new();
    for (site, (a, b)) in halves {
        match (a, b) {
            (Some(a), Some(b)) => {
                pairs.insert(site, LoraPair { a, b });
            }
            _ => return Err(mismatch(format!("incomplete adapter pair {}", site.tensor_name('*')))),
        }
    }
    Ok(LoraAdapterSet {
        config: cfg,
        enabled,
        pairs,
    })
}

/// Reads a full model checkpoint. Every base tensor must be present with the expected shape.
pub fn load_model(path: &Path) -> Result<MultimodalModel, CheckpointError> {
    let file = TensorFile::read(path)?;
    let meta = parse_meta(&file, path)?;
    let p = path.display().to_string();
    if !matches!(meta.kind, Kind::Model) {
        return Err(CheckpointError::Mismatch {
            path: p,
            msg: "file holds adapters only; load a base model and use load_adapters".into(),
        });
    }
    let mut model = MultimodalModel::init(meta.model.clone(), 0)?;
    let by_name: BTreeMap<&str, &NamedTensor> = file.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for param in model.params_mut() {
        let t = by_name.get(param.name.as_str()).ok_or_else(|| CheckpointError::Mismatch {
            path: p.clone(),
            msg: format!("missing tensor {}", param.name),
        })?;
        if t.shape != param.shape {
            return Err(CheckpointError::Mismatch {
                path: p.clone(),
                msg: format!("{}: shape {:?}, expected {:?}", param.name, t.shape, param.shape),
            });
        }
        param.data.copy_from_slice(&t.data);
    }
    if let Some(cfg) = meta.lora {
        model.lora = Some(build_adapter_set(cfg, meta.lora_enabled, &file.tensors, model.config.d_model, &p)?);
    }
    if !model.all_finite() {
        return Err(CheckpointError::Corrupt {
            path: p,
            msg: "non-finite parameter values".into(),
        });
    }
    Ok(model)
}

/// Attaches adapters from an adapter-only (or full) checkpoint to `base`, replacing any present.
pub fn load_adapters(mut base: MultimodalModel, path: &Path) -> Result<MultimodalModel, CheckpointError> {
    let file = TensorFile::read(path)?;
    let meta = parse_meta(&file, path)?;
    let p = path.display().to_string();
    if meta.model != base.config {
        return Err(CheckpointError::Mismatch {
            path: p,
            msg: "adapter was trained for a different model config".into(),
        });
    }
    let cfg = meta.lora.ok_or_else(|| CheckpointError::Mismatch {
        path: p.clone(),
        msg: "file contains no adapters".into(),
    })?;
    base.lora = Some(build_adapter_set(cfg, meta.lora_enabled, &file.tensors, base.config.d_model, &p)?);
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach_lora, LoraConfig};

    fn tiny() -> MultimodalModel {
        let cfg = ModelConfig {
            d_model: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 20,
            adapter_stride: 2,
            max_seq: 64,
            ..ModelConfig::default()
        };
        MultimodalModel::init(cfg, 9).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = attach_lora(tiny(), LoraConfig { rank: 2, ..LoraConfig::default() }, 3).unwrap();
        m.lora.as_mut().unwrap().pairs.values_mut().for_each(|p| p.b.fill(0.25));
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn adapter_only_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let m = attach_lora(tiny(), LoraConfig { rank: 2, ..LoraConfig::default() }, 3).unwrap();
        save_adapters(&m, &path).unwrap();
        let loaded = load_adapters(tiny(), &path).unwrap();
        assert_eq!(loaded, m);
        assert!(matches!(load_model(&path), Err(CheckpointError::Mismatch { .. })));
    }

    #[test]
    fn truncated_and_garbage_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&tiny(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_model(&path), Err(CheckpointError::Corrupt { .. })));
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_model(&path), Err(CheckpointError::Corrupt { .. })));
        assert!(matches!(load_model(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        let mut file = TensorFile {
            meta: serde_json::to_value(Meta {
                kind: Kind::Model,
                model: m.config.clone(),
                lora: None,
                lora_enabled: true,
            })
            .unwrap(),
            tensors: m
                .params()
                .into_iter()
                .map(|p| NamedTensor { name: p.name, shape: p.shape, data: p.data.to_vec() })
                .collect(),
        };
        file.tensors[0].shape = vec![file.tensors[0].data.len(), 1];
        file.write(&path).unwrap();
        assert!(matches!(load_model(&path), Err(CheckpointError::Mismatch { .. })));
    }
}
