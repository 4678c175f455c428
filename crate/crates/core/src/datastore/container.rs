//! Single binary container for datasets, noise banks and checkpoints.
//!
//! Layout: 8-byte magic `UNLRN001`, a `u64` little-endian header length, the
//! UTF-8 JSON header, the raw little-endian blocks in the order the header
//! lists them, then a CRC32 (IEEE) of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{DatasetSplit, Provenance};
use crate::diff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, ModelState};
use crate::noisegen::{Method, NoiseBank};

pub const MAGIC: &[u8; 8] = b"UNLRN001";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected UNLRN001")]
    BadMagic,
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("header and payload disagree: {0}")]
    Inconsistent(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("file truncated")]
    Truncated,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dataset(DatasetSplit<f32>),
    Noise(NoiseBank<f32>),
    Model(ModelState<f32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Dataset,
    NoiseBank,
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Dtype {
    #[serde(rename = "f32le")]
    F32,
    #[serde(rename = "u32le")]
    U32,
    #[serde(rename = "u8")]
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Block {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: Kind,
    dtype: String,
    blocks: Vec<Block>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<ProvenanceMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise: Option<NoiseMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProvenanceMeta {
    source: String,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseMeta {
    method: Method,
    radius: f64,
    seed: u64,
}

fn block(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>) -> Block {
    let bytes = shape.iter().product::<usize>() * dtype.width();
    Block { name: name.into(), dtype, shape, bytes }
}

fn tensor_block(name: impl Into<String>, t: &Tensor<f32>) -> Block {
    block(name, Dtype::F32, t.shape().dims().to_vec())
}

fn push_f32(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Encodes a payload into container bytes.
pub fn encode(payload: &Payload) -> Vec<u8> {
    let mut body = Vec::new();
    let header = match payload {
        Payload::Dataset(d) => {
            let n = d.len();
            push_f32(&mut body, &d.images);
            for &y in &d.labels {
                body.extend_from_slice(&(y as u32).to_le_bytes());
            }
            body.extend(d.provenance.poisoned.iter().map(|&p| u8::from(p)));
            Header {
                kind: Kind::Dataset,
                dtype: "f32le".into(),
                blocks: vec![
                    tensor_block("images", &d.images),
                    block("labels", Dtype::U32, vec![n]),
                    block("poisoned", Dtype::U8, vec![n]),
                ],
                num_classes: Some(d.num_classes),
                provenance: Some(ProvenanceMeta { source: d.provenance.source.clone(), seed: d.provenance.seed }),
                noise: None,
                model: None,
            }
        }
        Payload::Noise(b) => {
            push_f32(&mut body, &b.deltas);
            Header {
                kind: Kind::NoiseBank,
                dtype: "f32le".into(),
                blocks: vec![tensor_block("deltas", &b.deltas)],
                num_classes: None,
                provenance: None,
                noise: Some(NoiseMeta { method: b.method, radius: b.radius, seed: b.seed }),
                model: None,
            }
        }
        Payload::Model(m) => {
            let mut blocks = Vec::new();
            for (name, t) in &m.params {
                push_f32(&mut body, t);
                blocks.push(tensor_block(format!("param:{name}"), t));
            }
            for (name, t) in &m.momentum {
                push_f32(&mut body, t);
                blocks.push(tensor_block(format!("momentum:{name}"), t));
            }
            Header {
                kind: Kind::Model,
                dtype: "f32le".into(),
                blocks,
                num_classes: None,
                provenance: None,
                noise: None,
                model: Some(m.spec.clone()),
            }
        }
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 8 + json.len() + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn to_shape(dims: &[usize]) -> std::result::Result<Shape, ContainerError> {
    match *dims {
        [n, c, h, w] => Ok(Shape::new(n, c, h, w)),
        _ => Err(ContainerError::Inconsistent(format!("tensor block with rank {}", dims.len()))),
    }
}

fn read_f32(bytes: &[u8], shape: Shape) -> Tensor<f32> {
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(shape, data).expect("byte count checked against shape")
}

/// Decodes and validates container bytes.
pub fn decode(bytes: &[u8]) -> std::result::Result<Payload, ContainerError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 8 + 8 + 4 {
        return Err(ContainerError::Truncated);
    }
    let (content, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(content);
    if stored != computed {
        return Err(ContainerError::CrcMismatch { stored, computed });
    }
    let hlen = u64::from_le_bytes(content[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(hlen).ok_or(ContainerError::Truncated)?;
    if body_start > content.len() {
        return Err(ContainerError::Truncated);
    }
    let header: Header =
        serde_json::from_slice(&content[16..body_start]).map_err(|e| ContainerError::Header(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(ContainerError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let body = &content[body_start..];
    let mut blocks: BTreeMap<&str, (&Block, &[u8])> = BTreeMap::new();
    let mut offset = 0usize;
    for b in &header.blocks {
        let expect = b.shape.iter().product::<usize>() * b.dtype.width();
        if expect != b.bytes {
            return Err(ContainerError::Inconsistent(format!(
                "block {} declares {} bytes for shape {:?}",
                b.name, b.bytes, b.shape
            )));
        }
        let end = offset + b.bytes;
        if end > body.len() {
            return Err(ContainerError::Inconsistent(format!("block {} runs past the payload", b.name)));
        }
        blocks.insert(&b.name, (b, &body[offset..end]));
        offset = end;
    }
    if offset != body.len() {
        return Err(ContainerError::Inconsistent(format!("{} trailing payload bytes", body.len() - offset)));
    }
    let get = |name: &str, dtype: Dtype| -> std::result::Result<(&Block, &[u8]), ContainerError> {
        let (b, raw) = blocks
            .get(name)
            .copied()
            .ok_or_else(|| ContainerError::Inconsistent(format!("missing block {name}")))?;
        if b.dtype != dtype {
            return Err(ContainerError::Inconsistent(format!("block {name} has dtype {:?}", b.dtype)));
        }
        Ok((b, raw))
    };
    match header.kind {
        Kind::Dataset => {
            let (ib, iraw) = get("images", Dtype::F32)?;
            let shape = to_shape(&ib.shape)?;
            let (lb, lraw) = get("labels", Dtype::U32)?;
            let (pb, praw) = get("poisoned", Dtype::U8)?;
            if lb.shape != [shape.n] || pb.shape != [shape.n] {
                return Err(ContainerError::Inconsistent("label or flag count differs from image count".into()));
            }
            let labels = lraw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
                .collect();
            let poisoned = praw.iter().map(|&b| b != 0).collect();
            let meta = header.provenance.ok_or_else(|| ContainerError::Header("dataset without provenance".into()))?;
            let num_classes = header.num_classes.ok_or_else(|| ContainerError::Header("dataset without num_classes".into()))?;
            let split = DatasetSplit {
                images: read_f32(iraw, shape),
                labels,
                num_classes,
                provenance: Provenance { source: meta.source, seed: meta.seed, poisoned },
            };
            split.validate().map_err(|e| ContainerError::Inconsistent(e.to_string()))?;
            Ok(Payload::Dataset(split))
        }
        Kind::NoiseBank => {
            let (db, raw) = get("deltas", Dtype::F32)?;
            let meta = header.noise.ok_or_else(|| ContainerError::Header("noise bank without metadata".into()))?;
            Ok(Payload::Noise(NoiseBank {
                deltas: read_f32(raw, to_shape(&db.shape)?),
                radius: meta.radius,
                method: meta.method,
                seed: meta.seed,
            }))
        }
        Kind::Model => {
            let spec = header.model.ok_or_else(|| ContainerError::Header("model without spec".into()))?;
            let mut params = BTreeMap::new();
            let mut momentum = BTreeMap::new();
            for b in &header.blocks {
                let (_, raw) = get(&b.name, Dtype::F32)?;
                let t = read_f32(raw, to_shape(&b.shape)?);
                if let Some(name) = b.name.strip_prefix("param:") {
                    params.insert(name.to_string(), t);
                } else if let Some(name) = b.name.strip_prefix("momentum:") {
                    momentum.insert(name.to_string(), t);
                } else {
                    return Err(ContainerError::Inconsistent(format!("unexpected block {}", b.name)));
                }
            }
            let reference = crate::models::init_model::<f32>(&spec, 0)
                .map_err(|e| ContainerError::Inconsistent(e.to_string()))?;
            let same_layout = |m: &BTreeMap<String, Tensor<f32>>| {
                m.len() == reference.params.len()
                    && m.iter().all(|(k, v)| reference.params.get(k).is_some_and(|r| r.shape() == v.shape()))
            };
            if !same_layout(&params) || !same_layout(&momentum) {
                return Err(ContainerError::Inconsistent("parameter blocks do not match the model spec".into()));
            }
            Ok(Payload::Model(ModelState { spec, params, momentum }))
        }
    }
}

pub fn write_container(path: impl AsRef<Path>, payload: &Payload) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(payload)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Payload> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
