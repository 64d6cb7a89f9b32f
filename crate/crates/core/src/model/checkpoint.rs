//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic `T2MCKPT\0`, `u32` version, `u32` header length, a JSON header
//! holding the model config, vocabulary and role, `u32` tensor count, then
//! per tensor: `u32` name length, name bytes, `u32` rank, `u64` per
//! dimension, and the values as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights, Role, Vocabulary};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"T2MCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocabulary: Vec<String>,
    role: Role,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::invalid(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn write_checkpoint<W: Write>(weights: &ModelWeights, mut out: W) -> Result<()> {
    let header = Header {
        config: weights.config.clone(),
        vocabulary: weights.vocab.words().to_vec(),
        role: weights.role,
    };
    let header = serde_json::to_vec(&header).map_err(std::io::Error::from)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let tensors = weights.named_tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes<R: Read>(input: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelWeights> {
    let magic = read_bytes(&mut input, MAGIC.len())?;
    if magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = read_u32(&mut input)? as usize;
    let header: Header = serde_json::from_slice(&read_bytes(&mut input, header_len)?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let vocab = Vocabulary::from_words(header.vocabulary)?;
    // A freshly initialised model supplies the expected names and shapes.
    let mut weights = ModelWeights::init(header.config, vocab, 0)?;
    weights.role = header.role;
    let expected: Vec<(String, Vec<usize>)> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = read_u32(&mut input)? as usize;
    if count != expected.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for ((name, shape), slot) in expected.into_iter().zip(weights.tensors_mut()) {
        let name_len = read_u32(&mut input)? as usize;
        let found = String::from_utf8(read_bytes(&mut input, name_len)?)
            .map_err(|_| corrupt("non-UTF-8 name"))?;
        if found != name {
            return Err(corrupt(format!("expected tensor {name}, found {found}")));
        }
        let rank = read_u32(&mut input)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(corrupt(format!(
                "tensor {name} has shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = read_bytes(&mut input, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *slot = Tensor::new(dims, data)?;
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    if !weights.is_finite() {
        return Err(Error::NonFinite {
            op: "read_checkpoint",
        });
    }
    Ok(weights)
}

pub fn write_checkpoint_file(weights: &ModelWeights, path: &Path) -> Result<()> {
    write_checkpoint(weights, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint_file(path: &Path) -> Result<ModelWeights> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
