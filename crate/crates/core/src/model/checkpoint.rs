//! Binary checkpoint format.
//!
//! ```text
//! "DBLE" | version: u32 | tensor_count: u32
//! per tensor: name_len: u32 | name (UTF-8) | rank: u32 | dims: u32 * rank | values: f32 * prod(dims)
//! metadata_len: u32 | metadata (UTF-8 JSON)
//! ```
//! All integers and reals are little-endian. Tensors are stored encoder
//! first, then the confidence head (or the softmax head for vanilla models).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{head_shapes, ConfidenceConfig, DbleModel, EncoderConfig, VanillaModel};
use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DBLE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Dble(DbleModel),
    Vanilla(VanillaModel),
}

impl SavedModel {
    pub fn encoder(&self) -> &EncoderConfig {
        match self {
            SavedModel::Dble(m) => &m.encoder,
            SavedModel::Vanilla(m) => &m.encoder,
        }
    }

    /// Rounds every parameter to `f32`, the precision the file stores.
    pub fn round_to_f32(&mut self) {
        match self {
            SavedModel::Dble(m) => {
                m.theta.round_to_f32();
                m.phi.round_to_f32();
            }
            SavedModel::Vanilla(m) => {
                m.theta.round_to_f32();
                m.head.round_to_f32();
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub final_metrics: BTreeMap<String, f64>,
    /// The run configuration that produced this checkpoint.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SavedModel,
    pub training: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelMeta {
    Dble {
        encoder: EncoderConfig,
        confidence: ConfidenceConfig,
    },
    Vanilla {
        encoder: EncoderConfig,
        num_classes: usize,
        temperature: Option<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    model: ModelMeta,
    training: TrainingMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_params(out: &mut Vec<u8>, p: &ParamSet) -> Result<()> {
    for (name, t) in p.iter() {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (meta, sets): (ModelMeta, [&ParamSet; 2]) = match &self.model {
            SavedModel::Dble(m) => (
                ModelMeta::Dble {
                    encoder: m.encoder.clone(),
                    confidence: m.confidence.clone(),
                },
                [&m.theta, &m.phi],
            ),
            SavedModel::Vanilla(m) => (
                ModelMeta::Vanilla {
                    encoder: m.encoder.clone(),
                    num_classes: m.num_classes,
                    temperature: m.temperature,
                },
                [&m.theta, &m.head],
            ),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, sets.iter().map(|s| s.len()).sum())?;
        for s in sets {
            put_params(&mut out, s)?;
        }
        let json = serde_json::to_string(&Metadata {
            format_version: FORMAT_VERSION,
            model: meta,
            training: self.training.clone(),
        })?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(json.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a DBLE checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format("tensor too large".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint metadata".into()));
        }
        if meta.format_version != version {
            return Err(Error::Format("metadata version disagrees with header".into()));
        }

        let mut tensors = tensors.into_iter();
        let model = match meta.model {
            ModelMeta::Dble { encoder, confidence } => {
                let theta = collect(&mut tensors, &encoder.param_shapes(), count)?;
                let phi = collect(&mut tensors, &confidence.param_shapes(encoder.embed_dim), count)?;
                SavedModel::Dble(DbleModel {
                    encoder,
                    confidence,
                    theta,
                    phi,
                })
            }
            ModelMeta::Vanilla {
                encoder,
                num_classes,
                temperature,
            } => {
                let theta = collect(&mut tensors, &encoder.param_shapes(), count)?;
                let head = collect(&mut tensors, &head_shapes(encoder.embed_dim, num_classes), count)?;
                SavedModel::Vanilla(VanillaModel {
                    encoder,
                    num_classes,
                    theta,
                    head,
                    temperature,
                })
            }
        };
        if tensors.next().is_some() {
            return Err(Error::Consistency(format!(
                "checkpoint holds {count} tensors, more than its configuration describes"
            )));
        }
        Ok(Checkpoint {
            model,
            training: meta.training,
        })
    }
}

fn collect(
    tensors: &mut impl Iterator<Item = (String, Tensor)>,
    expected: &[(String, Vec<usize>)],
    count: usize,
) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, shape) in expected {
        let (found, t) = tensors.next().ok_or_else(|| {
            Error::Consistency(format!(
                "checkpoint holds {count} tensors; configuration needs `{name}` as well"
            ))
        })?;
        if &found != name || t.shape() != shape.as_slice() {
            return Err(Error::Consistency(format!(
                "expected tensor `{name}` {shape:?}, found `{found}` {:?}",
                t.shape()
            )));
        }
        p.insert(found, t)?;
    }
    Ok(p)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
