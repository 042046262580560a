//! The `SRFM1` model file.
//!
//! ```text
//! magic        5 bytes   "SRFM1"
//! header_len   u32 LE
//! header       UTF-8 JSON {config, vocab, meta}
//! block_count  u32 LE
//! block*       name_len u32 LE | name UTF-8 | ndim u32 LE | dims u32 LE* | f32 LE*
//! ```
//!
//! Blocks are written in parameter-name order. Values are stored as raw bits,
//! so a load/save cycle reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderModel, ParamStore};
use super::vocab::Vocab;
use super::EncoderError;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"SRFM1";

/// Training metadata carried next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub id: Option<String>,
    pub stage: Option<u8>,
    pub variant: Option<String>,
    pub epoch: Option<usize>,
    pub step: Option<usize>,
    pub validation: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: EncoderConfig,
    vocab: Vec<String>,
    meta: ModelMeta,
}

pub fn to_bytes(model: &EncoderModel, meta: &ModelMeta) -> Result<Vec<u8>, EncoderError> {
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.words().to_vec(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| EncoderError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.len())?;
    for (name, t) in &model.params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(EncoderModel, ModelMeta), EncoderError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(EncoderError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| EncoderError::Format(format!("header: {e}")))?;
    let vocab = Vocab::from_words(&header.vocab);
    if vocab.words().len() != header.vocab.len() {
        return Err(EncoderError::Format(
            "vocabulary contains duplicate or reserved entries".into(),
        ));
    }
    let mut params = ParamStore::new();
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| EncoderError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| EncoderError::Format("block too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(EncoderError::Format(format!(
                "duplicate parameter block {name}"
            )));
        }
    }
    if r.pos != bytes.len() {
        return Err(EncoderError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let model = EncoderModel {
        config: header.config,
        vocab,
        params,
    };
    model.validate()?;
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &EncoderModel, meta: &ModelMeta) -> Result<(), EncoderError> {
    let bytes = to_bytes(model, meta)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| EncoderError::io(path, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| EncoderError::io(path, e))
}

pub fn load(path: &Path) -> Result<(EncoderModel, ModelMeta), EncoderError> {
    let bytes = std::fs::read(path).map_err(|e| EncoderError::io(path, e))?;
    from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), EncoderError> {
    let v =
        u32::try_from(v).map_err(|_| EncoderError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(EncoderError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
