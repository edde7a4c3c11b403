//! Binary checkpoint: magic, version, JSON metadata, then one record per
//! parameter tensor. All integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{Precision, Real, Tensor};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{build_model, Model, ModelConfig};
use crate::text::{EmbeddingTable, Vocabulary};

pub const MAGIC: &[u8; 8] = b"CAPSTXT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
}

pub fn encode_checkpoint<F: Real>(model: &Model<F>, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let meta = CheckpointMeta { config: model.config.clone(), vocab: vocab.clone() };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Contract(format!("metadata: {e}")))?;
    let mut out = Vec::with_capacity(16 + meta.len() + model.params.element_count() * F::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| too_big("metadata"))?.to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, p) in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big("name"))?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(F::DTYPE);
        out.push(u8::try_from(p.value.rank()).map_err(|_| too_big("rank"))?);
        for &e in p.value.shape() {
            out.extend_from_slice(&u32::try_from(e).map_err(|_| too_big("extent"))?.to_le_bytes());
        }
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Contract(format!("{what} too large for the checkpoint format"))
}

pub fn save_checkpoint<F: Real>(model: &Model<F>, vocab: &Vocabulary, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, vocab)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                msg: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Checkpoint { offset, msg: msg.into() }
    }
}

struct Record {
    name: String,
    offset: usize,
    dtype: u8,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_header<'a>(bytes: &'a [u8]) -> Result<(Reader<'a>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic bytes"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version { found: version, supported: VERSION });
    }
    let len = r.u32("metadata length")? as usize;
    let at = r.pos;
    let meta = r.take(len, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta).map_err(|e| r.err(at, format!("bad metadata: {e}")))?;
    Ok((r, meta))
}

fn read_records(r: &mut Reader<'_>) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    while r.pos < r.bytes.len() {
        let offset = r.pos;
        let n = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| r.err(offset + 2, "tensor name is not UTF-8"))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        let width = match dtype {
            1 => 4,
            2 => 8,
            other => return Err(r.err(dtype_at, format!("unknown dtype code {other}"))),
        };
        let rank = r.u8("rank")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<_>>()?;
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let bytes = count
            .and_then(|c| c.checked_mul(width))
            .ok_or_else(|| r.err(offset, format!("tensor {name:?} is too large")))?;
        let raw = r.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(width)
            .map(|c| if width == 4 { f32::read_le(c) as f64 } else { f64::read_le(c) })
            .collect();
        records.push(Record { name, offset, dtype, shape, data });
    }
    Ok(records)
}

/// Precision the parameters were stored at.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut r, _) = read_header(&bytes)?;
    let records = read_records(&mut r)?;
    Ok(match records.first().map(|rec| rec.dtype) {
        Some(1) => Precision::F32,
        _ => Precision::F64,
    })
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<(Model<F>, Vocabulary)> {
    let (mut r, meta) = read_header(bytes)?;
    let records = read_records(&mut r)?;
    let embed = records
        .iter()
        .find(|rec| rec.name == "embedding")
        .ok_or_else(|| r.err(bytes.len(), "missing embedding tensor"))?;
    let table = EmbeddingTable {
        weights: Tensor::zeros(&embed.shape).map_err(|e| r.err(embed.offset, e.to_string()))?,
        trainable: meta.config.trainable_embeddings,
    };
    let mut model = build_model::<F>(meta.config, table)?;
    if records.len() != model.params.len() {
        return Err(r.err(
            bytes.len(),
            format!("{} tensors stored, configuration defines {}", records.len(), model.params.len()),
        ));
    }
    for rec in records {
        let tensor = Tensor::from_f64(&rec.shape, &rec.data).map_err(|e| r.err(rec.offset, e.to_string()))?;
        model.params.assign(&rec.name, tensor).map_err(|e| r.err(rec.offset, e.to_string()))?;
    }
    Ok((model, meta.vocab))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(Model<F>, Vocabulary)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
