//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `SPXM`, `u32` version, `u32` config length and
//! that many bytes of JSON, `u32` tensor count, then per tensor: `u32` name
//! length, name bytes, `u32` rank, `u64` per dimension, `u8` dtype (0 = f32,
//! 1 = f64) and the raw values. A trailing `u32` CRC-32 covers everything
//! before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{param_infos, param_shapes, ModelConfig, MoTParams, MoTWeights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizers::{Codebook, ImageGeometry, ImageTokenizer, SemanticProjection};

const MAGIC: &[u8; 4] = b"SPXM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorEntry {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().to_vec()),
        }
    }

    pub fn to_f32(&self) -> Result<Tensor<f32>> {
        match &self.data {
            TensorData::F32(v) => Tensor::new(self.shape.clone(), v.clone()),
            TensorData::F64(_) => Err(Error::Format(format!("tensor {} is f64, expected f32", self.name))),
        }
    }
}

/// Raw archive: a JSON configuration block and a named tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    pub config: String,
    pub tensors: Vec<TensorEntry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl TensorArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => {
                    out.push(0);
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                TensorData::F64(v) => {
                    out.push(1);
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < 12 {
            return Err(Error::Format("truncated file: header incomplete".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checksum mismatch: file is corrupt or truncated".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let clen = r.u32("config length")? as usize;
        let config = std::str::from_utf8(r.take(clen, "config block")?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?
            .to_string();
        let n = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for i in 0..n {
            let what = format!("tensor {i}");
            let nlen = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(nlen, &what)?)
                .map_err(|_| Error::Format(format!("{what} name is not UTF-8")))?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let count: usize = shape.iter().product();
            let dtype = r.take(1, &name)?[0];
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("tensor {name} has unknown dtype {other}"))),
            };
            tensors.push(TensorEntry { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} unexpected trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    /// Write to a temporary sibling, sync, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn take(&mut self, name: &str) -> Result<TensorEntry> {
        let i = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?;
        Ok(self.tensors.remove(i))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ModelConfig,
    tokenizer: Option<ImageGeometry>,
    meta: serde_json::Value,
}

/// Parameters, optional tokenizer, free-form metadata and extra tensors
/// (optimizer moments and the like).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: MoTParams<f32>,
    pub tokenizer: Option<ImageTokenizer>,
    pub meta: serde_json::Value,
    pub extra: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(params: MoTParams<f32>) -> Self {
        Self {
            params,
            tokenizer: None,
            meta: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let block = ConfigBlock {
            model: self.params.config.clone(),
            tokenizer: self.tokenizer.as_ref().map(|t| t.geometry),
            meta: self.meta.clone(),
        };
        let mut tensors: Vec<TensorEntry> = self
            .params
            .named()
            .into_iter()
            .map(|(info, t)| TensorEntry::f32(info.name, t))
            .collect();
        if let Some(tok) = &self.tokenizer {
            let cb = |name: &str, c: &Codebook| TensorEntry {
                name: name.into(),
                shape: vec![c.k(), c.d()],
                data: TensorData::F32(c.codewords().to_vec()),
            };
            if let Some(c) = &tok.pixel {
                tensors.push(cb("tokenizer.pixel", c));
            }
            if let Some(c) = &tok.semantic {
                tensors.push(cb("tokenizer.semantic", c));
            }
            let pw = tok.projection.weights();
            tensors.push(TensorEntry {
                name: "tokenizer.projection".into(),
                shape: vec![pw.len()],
                data: TensorData::F32(pw.to_vec()),
            });
            if let Some(dec) = &tok.semantic_decoder {
                tensors.push(TensorEntry {
                    name: "tokenizer.semantic_decoder".into(),
                    shape: vec![dec.len()],
                    data: TensorData::F32(dec.clone()),
                });
            }
        }
        tensors.extend(self.extra.iter().cloned());
        Ok(TensorArchive {
            config: serde_json::to_string(&block)?,
            tensors,
        })
    }

    pub fn from_archive(mut ar: TensorArchive) -> Result<Self> {
        let block: ConfigBlock = serde_json::from_str(&ar.config)
            .map_err(|e| Error::Format(format!("config block: {e}")))?;
        block.model.validate()?;
        let mut values = Vec::new();
        for (info, shape) in param_infos(block.model.n_layers).into_iter().zip(param_shapes(&block.model)) {
            let t = ar.take(&info.name)?.to_f32()?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    info.name,
                    t.shape(),
                    shape
                )));
            }
            values.push(t);
        }
        let params = MoTParams {
            weights: MoTWeights::from_canonical(block.model.n_layers, values),
            config: block.model,
        };
        let tokenizer = match block.tokenizer {
            None => None,
            Some(geometry) => {
                let cb = |e: TensorEntry| -> Result<Codebook> {
                    if e.shape.len() != 2 {
                        return Err(Error::Format(format!("codebook {} is not a matrix", e.name)));
                    }
                    let (k, d) = (e.shape[0], e.shape[1]);
                    Codebook::new(k, d, e.to_f32()?.into_data())
                };
                let pixel = if geometry.patch > 0 { Some(cb(ar.take("tokenizer.pixel")?)?) } else { None };
                let semantic = if geometry.sem_grid > 0 { Some(cb(ar.take("tokenizer.semantic")?)?) } else { None };
                let projection = SemanticProjection::from_weights(ar.take("tokenizer.projection")?.to_f32()?.into_data())?;
                let semantic_decoder = if geometry.sem_grid > 0 {
                    Some(ar.take("tokenizer.semantic_decoder")?.to_f32()?.into_data())
                } else {
                    None
                };
                Some(ImageTokenizer {
                    geometry,
                    pixel,
                    semantic,
                    projection,
                    semantic_decoder,
                })
            }
        };
        Ok(Self {
            params,
            tokenizer,
            meta: block.meta,
            extra: ar.tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_archive()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(TensorArchive::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(TensorArchive::load(path)?)
    }
}
