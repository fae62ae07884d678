//! Single-file model archive: a magic line, a JSON header and a
//! little-endian weight blob.
//!
//! ```text
//! iconoforge-model-v1\n
//! u64 header length, header JSON {format, config, class_index_map, training_log, best_epoch}
//! u64 blob length, blob:
//!   u64 array count, then per backbone array: u64 length, f32 values
//!   u64 head weight length, f64 values; u64 head bias length, f64 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneWeights};
use super::config::ModelConfig;
use super::head::Head;
use super::{EpochLog, TrainedModel};
use crate::classes::IconClass;
use crate::error::{Error, Result};
use crate::ingest::md5_hex;

pub const MODEL_FORMAT: &str = "iconoforge-model-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    class_index_map: BTreeMap<IconClass, usize>,
    training_log: Vec<EpochLog>,
    best_epoch: Option<usize>,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

pub(crate) struct Truncated;

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        if self.buf.len() < n {
            return Err(Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn chunk(&mut self) -> Result<&'a [u8], Truncated> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn f32_array(&mut self) -> Result<Vec<f32>, Truncated> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or(Truncated)?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }

    pub fn f64_array(&mut self) -> Result<Vec<f64>, Truncated> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or(Truncated)?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

fn push_f32(out: &mut Vec<u8>, a: &[f32]) {
    out.extend_from_slice(&(a.len() as u64).to_le_bytes());
    for v in a {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_f64(out: &mut Vec<u8>, a: &[f64]) {
    out.extend_from_slice(&(a.len() as u64).to_le_bytes());
    for v in a {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn blob(model: &TrainedModel) -> Vec<u8> {
    let arrays = model.backbone.weights().arrays;
    let mut out = Vec::new();
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in &arrays {
        push_f32(&mut out, a);
    }
    push_f64(&mut out, &model.head.weight);
    push_f64(&mut out, &model.head.bias);
    out
}

/// Short content hash of the weights, used to tag derived artifacts.
pub fn checkpoint_id(model: &TrainedModel) -> String {
    md5_hex(&blob(model))[..12].to_string()
}

pub fn to_bytes(model: &TrainedModel) -> Vec<u8> {
    let header = Header {
        format: MODEL_FORMAT.into(),
        config: model.config.clone(),
        class_index_map: model.class_index_map.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
        training_log: model.training_log.clone(),
        best_epoch: model.best_epoch,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let blob = blob(model);
    let mut out = format!("{MODEL_FORMAT}\n").into_bytes();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let bad = |m: &str| Error::InvalidCheckpoint(m.to_string());
    let magic = format!("{MODEL_FORMAT}\n");
    let rest = bytes
        .strip_prefix(magic.as_bytes())
        .ok_or_else(|| bad("missing iconoforge-model-v1 tag"))?;
    let mut r = Reader::new(rest);
    let header: Header = serde_json::from_slice(r.chunk().map_err(|_| bad("truncated header"))?)
        .map_err(|e| Error::InvalidCheckpoint(format!("header: {e}")))?;
    if header.format != MODEL_FORMAT {
        return Err(bad("unsupported format"));
    }
    let blob = r.chunk().map_err(|_| bad("truncated weights"))?;
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let mut b = Reader::new(blob);
    let n = b.u64().map_err(|_| bad("truncated weights"))? as usize;
    let mut arrays = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        arrays.push(b.f32_array().map_err(|_| bad("truncated weights"))?);
    }
    let hw = b.f64_array().map_err(|_| bad("truncated head"))?;
    let hb = b.f64_array().map_err(|_| bad("truncated head"))?;
    if !b.is_empty() {
        return Err(bad("trailing weight bytes"));
    }
    let config = header.config;
    let backbone = Backbone::from_weights(&BackboneWeights {
        arch: config.backbone.clone(),
        arrays,
    })?;
    let in_c = config.backbone.out_channels();
    if hw.len() != in_c * config.n_classes || hb.len() != config.n_classes {
        return Err(bad("head shape does not match the configuration"));
    }
    let mut class_index_map = vec![None; config.n_classes];
    for (class, ch) in header.class_index_map {
        if ch >= config.n_classes || class_index_map[ch].replace(class).is_some() {
            return Err(bad("class index map is not a bijection"));
        }
    }
    let class_index_map = class_index_map
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("class index map is incomplete"))?;
    Ok(TrainedModel {
        head: Head::from_parts(in_c, config.n_classes, hw, hb),
        config,
        backbone,
        class_index_map,
        training_log: header.training_log,
        best_epoch: header.best_epoch,
    })
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
