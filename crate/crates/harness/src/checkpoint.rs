//! `PSAMCKPT` checkpoint files.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE header length, a JSON
//! header, then the tensor payload. Header offsets are relative to the
//! payload start. Dense tensors are little-endian `f32`; quantized weights
//! store their packed 4-bit codes followed by their `f32` block scales.

use std::fs;
use std::path::Path;

use peftsam_core::params::{ParamStore, ParamValue};
use peftsam_core::quant::QuantizedTensor;
use peftsam_core::samlite::SamLite;
use peftsam_core::tensor::{DType, NdArray};
use peftsam_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MAGIC: &[u8; 8] = b"PSAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantEntry {
    pub block: usize,
    pub scales_offset: u64,
    pub scales_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stop_reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    #[serde(default)]
    training: Option<TrainingSummary>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub training: Option<TrainingSummary>,
    pub model: SamLite<f32>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, model: SamLite<f32>) -> Self {
        Self {
            config,
            training: None,
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(store.len());
        for id in store.ids() {
            let meta = store.meta(id);
            let offset = payload.len() as u64;
            let entry = match store.value(id) {
                ParamValue::Dense(a) => {
                    payload.extend(f32_bytes(a.data()));
                    TensorEntry {
                        name: meta.name.clone(),
                        dtype: DType::F32.code(),
                        shape: meta.shape.clone(),
                        offset,
                        length: payload.len() as u64 - offset,
                        quant: None,
                    }
                }
                ParamValue::Quantized(q) => {
                    payload.extend_from_slice(q.packed());
                    let length = payload.len() as u64 - offset;
                    let scales_offset = payload.len() as u64;
                    payload.extend(f32_bytes(q.scales()));
                    TensorEntry {
                        name: meta.name.clone(),
                        dtype: DType::PackedU4.code(),
                        shape: meta.shape.clone(),
                        offset,
                        length,
                        quant: Some(QuantEntry {
                            block: q.block(),
                            scales_offset,
                            scales_length: payload.len() as u64 - scales_offset,
                        }),
                    }
                }
                ParamValue::Virtual | ParamValue::VirtualQuantized(_) => {
                    return Err(Error::Config(format!(
                        "preset {} is count-only and cannot be checkpointed",
                        self.config.preset
                    )))
                }
            };
            tensors.push(entry);
        }
        let header = Header {
            config: self.config.clone(),
            training: self.training.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing PSAMCKPT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..start]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[start..];

        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut take = |off: u64, len: u64| -> Result<&[u8]> {
            let end = off.checked_add(len).filter(|&e| e <= payload.len() as u64);
            let end = end.ok_or_else(|| bad(format!("tensor span {off}+{len} exceeds payload")))?;
            spans.push((off, end));
            Ok(&payload[off as usize..end as usize])
        };

        let cfg = &header.config;
        let model_cfg = cfg.model_config()?;
        let mut model = match &cfg.peft {
            Some(p) => SamLite::build(model_cfg, Some(p), cfg.seed)?,
            None => SamLite::build_base(model_cfg, cfg.seed)?,
        };
        let store = &mut model.store;
        if header.tensors.len() != store.len() {
            return Err(bad(format!(
                "{} tensors stored, model has {} parameters",
                header.tensors.len(),
                store.len()
            )));
        }
        for t in &header.tensors {
            let id = store
                .id(&t.name)
                .ok_or_else(|| bad(format!("unknown tensor {}", t.name)))?;
            if t.shape != store.meta(id).shape {
                return Err(bad(format!("{}: shape {:?} vs model {:?}", t.name, t.shape, store.meta(id).shape)));
            }
            let raw = take(t.offset, t.length)?;
            match (DType::from_code(t.dtype), &t.quant) {
                (Some(DType::F32), None) => {
                    let a = NdArray::new(t.shape.clone(), bytes_f32(raw)).map_err(|e| bad(e.to_string()))?;
                    store.set_dense(id, a)?;
                }
                (Some(DType::PackedU4), Some(q)) => {
                    let packed = raw.to_vec();
                    let scales = bytes_f32(take(q.scales_offset, q.scales_length)?);
                    let qt = QuantizedTensor::from_parts(t.shape.clone(), packed, scales, q.block)
                        .map_err(|e| bad(e.to_string()))?;
                    if !store.is_quantized(id) {
                        return Err(bad(format!("{} is quantized on disk but dense in the model", t.name)));
                    }
                    store.set_quantized(id, qt)?;
                }
                _ => return Err(bad(format!("{}: unsupported dtype code {}", t.name, t.dtype))),
            }
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(bad("overlapping tensor spans".into()));
        }
        Ok(Self {
            config: header.config,
            training: header.training,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

/// Dense weights of a checkpoint, for use as a base.
pub fn load_base_weights(path: &Path) -> Result<ParamStore<f32>> {
    let ck = Checkpoint::load(path)?;
    if ck.model.store.ids().any(|id| ck.model.store.is_quantized(id)) {
        return Err(Error::Config(format!(
            "{} holds quantized weights and cannot serve as a full-precision base",
            path.display()
        )));
    }
    Ok(ck.model.store)
}
