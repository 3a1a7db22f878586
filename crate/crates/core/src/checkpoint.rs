//! Binary checkpoint container shared by the mapping model and the VLM.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VLLA" | u32 version | u64 encoder_hash | u32 len | config JSON
//! u32 tensor count
//! per tensor: u32 head | u32 len | name | u32 ndim | u64 dims... | f32 data...
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::mapping::{Head, MappingParams};
use crate::vlm::{VlmParams, VlmVariant};

pub const MAGIC: &[u8; 4] = b"VLLA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub head: u32,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn from_f64(head: u32, name: &str, shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor {
            head,
            name: name.to_string(),
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder_hash: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.encoder_hash.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&t.head.to_le_bytes());
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        let encoder_hash = r.u64()?;
        let len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let head = r.u32()?;
            let len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.bad("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor {
                head,
                name,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            encoder_hash,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&fsio::read(path)?, path)
    }

    fn meta<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::BadCheckpoint {
            path: path.to_path_buf(),
            reason: format!("config block: {e}"),
        })
    }

    fn tensor(&self, head: u32, name: &str, shape: &[usize], path: &Path) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.head == head && t.name == name)
            .ok_or_else(|| Error::BadCheckpoint {
                path: path.to_path_buf(),
                reason: format!("missing tensor {name} of head {head}"),
            })?;
        if t.shape != shape {
            return Err(Error::BadCheckpoint {
                path: path.to_path_buf(),
                reason: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape),
            });
        }
        Ok(t.to_f64())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile {
                path: self.path.to_path_buf(),
                needed: self.pos + n,
                available: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bad(&self, reason: String) -> Error {
        Error::BadCheckpoint {
            path: self.path.to_path_buf(),
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MappingMeta {
    kind: String,
    stage_hash: String,
    d: usize,
    p: usize,
    adapter_alpha: f64,
    tau: f64,
    normalize: bool,
    head_of_attr: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VlmMeta {
    kind: String,
    stage_hash: String,
    variant: VlmVariant,
    d: usize,
    tau: f64,
}

fn check_kind(kind: &str, want: &str, path: &Path) -> Result<()> {
    if kind != want {
        return Err(Error::BadCheckpoint {
            path: path.to_path_buf(),
            reason: format!("holds a {kind} model, expected {want}"),
        });
    }
    Ok(())
}

fn head_tensors(head: &Head, i: u32, d: usize) -> Vec<Tensor> {
    let shapes = [vec![d, d], vec![d], vec![d, d], vec![d]];
    Head::TENSOR_NAMES
        .iter()
        .zip(head.tensors())
        .zip(shapes)
        .map(|((name, data), shape)| Tensor::from_f64(i, name, shape, data))
        .collect()
}

pub fn mapping_checkpoint(params: &MappingParams, stage_hash: &str) -> Result<Checkpoint> {
    let meta = MappingMeta {
        kind: "mapping".into(),
        stage_hash: stage_hash.to_string(),
        d: params.d,
        p: params.heads.len(),
        adapter_alpha: params.adapter_alpha,
        tau: params.tau,
        normalize: params.normalize,
        head_of_attr: params.head_of_attr.clone(),
    };
    Ok(Checkpoint {
        encoder_hash: params.encoder_hash,
        config: serde_json::to_value(meta)?,
        tensors: params
            .heads
            .iter()
            .enumerate()
            .flat_map(|(i, h)| head_tensors(h, i as u32, params.d))
            .collect(),
    })
}

/// Parameters and the stage hash recorded at save time.
pub fn mapping_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(MappingParams, String)> {
    let meta: MappingMeta = ck.meta(path)?;
    check_kind(&meta.kind, "mapping", path)?;
    let d = meta.d;
    let mut heads = Vec::with_capacity(meta.p);
    for i in 0..meta.p as u32 {
        heads.push(Head {
            w1: Array2::from_shape_vec((d, d), ck.tensor(i, "w1", &[d, d], path)?).expect("shape checked"),
            b1: Array1::from(ck.tensor(i, "b1", &[d], path)?),
            w2: Array2::from_shape_vec((d, d), ck.tensor(i, "w2", &[d, d], path)?).expect("shape checked"),
            b2: Array1::from(ck.tensor(i, "b2", &[d], path)?),
        });
    }
    if meta.head_of_attr.iter().any(|&h| h >= meta.p) {
        return Err(Error::BadCheckpoint {
            path: path.to_path_buf(),
            reason: "head assignment references a missing head".into(),
        });
    }
    Ok((
        MappingParams {
            heads,
            head_of_attr: meta.head_of_attr,
            adapter_alpha: meta.adapter_alpha,
            tau: meta.tau,
            normalize: meta.normalize,
            d,
            encoder_hash: ck.encoder_hash,
        },
        meta.stage_hash,
    ))
}

pub fn vlm_checkpoint(params: &VlmParams, stage_hash: &str) -> Result<Checkpoint> {
    let d = params.d;
    let meta = VlmMeta {
        kind: "vlm".into(),
        stage_hash: stage_hash.to_string(),
        variant: params.variant,
        d,
        tau: params.tau,
    };
    let shapes = [vec![d, d], vec![d], vec![d, d], vec![d]];
    Ok(Checkpoint {
        encoder_hash: params.encoder_hash,
        config: serde_json::to_value(meta)?,
        tensors: VlmParams::TENSOR_NAMES
            .iter()
            .zip(params.tensors())
            .zip(shapes)
            .map(|((name, data), shape)| Tensor::from_f64(0, name, shape, data))
            .collect(),
    })
}

pub fn vlm_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(VlmParams, String)> {
    let meta: VlmMeta = ck.meta(path)?;
    check_kind(&meta.kind, "vlm", path)?;
    let d = meta.d;
    Ok((
        VlmParams {
            w1: Array2::from_shape_vec((d, d), ck.tensor(0, "w1", &[d, d], path)?).expect("shape checked"),
            b1: Array1::from(ck.tensor(0, "b1", &[d], path)?),
            w2: Array2::from_shape_vec((d, d), ck.tensor(0, "w2", &[d, d], path)?).expect("shape checked"),
            b2: Array1::from(ck.tensor(0, "b2", &[d], path)?),
            tau: meta.tau,
            d,
            encoder_hash: ck.encoder_hash,
            variant: meta.variant,
        },
        meta.stage_hash,
    ))
}

/// Rounds every value to the nearest `f32`, matching what a checkpoint
/// round trip produces.
pub fn round_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
