//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "EMOC"  version:u32  header_len:u32  header:JSON
//! repeated: name_len:u32 name rank:u32 dims:u64*rank values:f64*prod(dims)
//! ```
//!
//! The header records the model kind, its config, the class order and both
//! vocabularies. Tensors follow in parameter declaration order, then a
//! frozen affect table (if any), then the word-vector matrix. The loader
//! rebuilds the model from the header and then expects exactly those
//! tensors, so a truncated file, a renamed tensor or trailing bytes all fail.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelKind};
use crate::corpus::EmotionLabel;
use crate::embed::WordTable;
use crate::error::{Error, Result};
use crate::neural::Tensor;

pub const MAGIC: &[u8; 4] = b"EMOC";
pub const CHECKPOINT_VERSION: u32 = 1;

const WORDS_TENSOR: &str = "words.matrix";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
    classes: Vec<String>,
    words: Vec<String>,
    affect_words: Vec<String>,
}

fn class_order() -> Vec<String> {
    EmotionLabel::ALL.iter().map(|l| l.name().to_string()).collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let header = Header {
        kind: model.kind,
        config: model.config.clone(),
        classes: class_order(),
        words: model.words.words().to_vec(),
        affect_words: model.affect.as_ref().map(|a| a.words().to_vec()).unwrap_or_default(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    // visit_stored_mut needs &mut; a clone keeps the saving model untouched
    let mut copy = model.clone();
    copy.visit_stored_mut(&mut |name, t| put_tensor(&mut out, name, t.shape(), t.value()));
    let words = model.words();
    put_tensor(&mut out, WORDS_TENSOR, &[words.len(), words.dim()], words.matrix());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Reads the next tensor and checks its name and shape.
    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let len = self.u32("tensor name length")? as usize;
        let got = self.take(len, "tensor name")?;
        if got != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name:?}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        let rank = self.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u64("tensor dims")? as usize);
        }
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {dims:?}, model expects {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, name)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.classes != class_order() {
        return Err(Error::Checkpoint(format!(
            "class order {:?} differs from {:?}",
            header.classes,
            class_order()
        )));
    }
    let d_g = header.config.d_g;
    let mut model = Model::new(
        header.kind,
        header.config,
        WordTable::empty(d_g),
        header.affect_words,
        0,
    )
    .map_err(|e| Error::Checkpoint(format!("header describes an invalid model: {e}")))?;

    let mut failure = None;
    model.visit_stored_mut(&mut |name, t: &mut Tensor| {
        if failure.is_some() {
            return;
        }
        match r.tensor(name, t.shape()) {
            Ok(values) => t.value_mut().copy_from_slice(&values),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let matrix = r.tensor(WORDS_TENSOR, &[header.words.len(), d_g])?;
    let words = if header.words.is_empty() {
        WordTable::empty(d_g)
    } else {
        WordTable::from_parts(header.words, d_g, matrix)
            .map_err(|e| Error::Checkpoint(format!("bad word table: {e}")))?
    };
    model.set_words(words);
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, save_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
