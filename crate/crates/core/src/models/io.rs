//! Little-endian tensor container used for weights and optimizer state.
//!
//! Layout: magic (4 bytes), version u32 = 1, kind u8, JSON blob (u32 length +
//! UTF-8), tensor count u32, then per tensor: name (u32 length + UTF-8),
//! ndim u8 = 4, four u32 dims, raw f32 data.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result, WeightsError};
use crate::tensor::{Scalar, Shape, Tensor};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"SRFW";
pub const FORMAT_VERSION: u32 = 1;

const KIND_DRN: u8 = 0;
const KIND_RCAN: u8 = 1;

/// Decoded contents of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: u8,
    pub json: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn write_container(
    magic: [u8; 4],
    kind: u8,
    json: &str,
    tensors: &[(&str, Tensor<f32>)],
) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 4 + n.len() + 1 + 16 + 4 * t.len())
        .sum();
    let mut buf = Vec::with_capacity(17 + json.len() + payload);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(kind);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(4);
        for d in t.shape().dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(WeightsError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightsError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &'static str) -> Result<String, WeightsError> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| WeightsError::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn read_container(bytes: &[u8], magic: [u8; 4]) -> Result<Container, WeightsError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let found = r.take(4, "magic")?;
    if found != magic {
        let mut f = [0u8; 4];
        f.copy_from_slice(found);
        return Err(WeightsError::BadMagic {
            found: f,
            expected: magic,
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let kind = r.u8("config kind")?;
    let json = r.string("config blob")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let ndim = r.u8("ndim")?;
        if ndim != 4 {
            return Err(WeightsError::Corrupt(format!(
                "tensor {name} has ndim {ndim}, expected 4"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor dims")? as usize;
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let nbytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or(WeightsError::Truncated("tensor data"))?;
        let raw = r.take(nbytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(Shape::from(dims), data).expect("length computed from dims");
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Container {
        kind,
        json,
        tensors,
    })
}

pub fn encode_weights<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let (kind, json) = match model.config() {
        ModelConfig::Drn(c) => (KIND_DRN, serde_json::to_string(c)),
        ModelConfig::Rcan(c) => (KIND_RCAN, serde_json::to_string(c)),
    };
    let json = json.expect("configs serialize");
    let params = model.parameters();
    let tensors: Vec<(&str, Tensor<f32>)> = params
        .iter()
        .map(|p| (p.name.as_str(), p.value.cast()))
        .collect();
    write_container(WEIGHTS_MAGIC, kind, &json, &tensors)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model<f32>> {
    let c = read_container(bytes, WEIGHTS_MAGIC)?;
    let config = match c.kind {
        KIND_DRN => ModelConfig::Drn(
            serde_json::from_str(&c.json)
                .map_err(|e| WeightsError::Corrupt(format!("config: {e}")))?,
        ),
        KIND_RCAN => ModelConfig::Rcan(
            serde_json::from_str(&c.json)
                .map_err(|e| WeightsError::Corrupt(format!("config: {e}")))?,
        ),
        k => return Err(WeightsError::UnknownKind(k).into()),
    };
    config.validate()?;
    let mut model = Model::<f32>::build(&config, 0)?;
    let mut params = model.parameters_mut();
    if params.len() != c.tensors.len() {
        return Err(WeightsError::CountMismatch {
            found: c.tensors.len() as u32,
            expected: params.len(),
        }
        .into());
    }
    for (p, (name, t)) in params.iter_mut().zip(c.tensors) {
        if p.name != name {
            return Err(WeightsError::NameMismatch {
                expected: p.name.clone(),
                found: name,
            }
            .into());
        }
        if p.value.shape() != t.shape() {
            return Err(WeightsError::ShapeMismatch {
                name,
                expected: p.value.shape().dims(),
                found: t.shape().dims(),
            }
            .into());
        }
        p.value = t;
        p.zero_grad();
    }
    Ok(model)
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
