//! Checkpoint files: a JSON header followed by tensor containers.
//!
//! Layout: `CBCK`, version byte, little-endian u32 header length, header
//! JSON, then one container per parameter, two per running-statistics slot
//! (mean, var) and two per parameter with Adam moments (m, v), in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, ModelGraph};
use crate::autodiff::{AdamConfig, AdamState, Moments, Tensor};
use crate::data::container::{decode_prefix, encode, Container};
use crate::error::FormatErrorKind;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CBCK";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    digest: String,
    config: ArchitectureConfig,
    step: u64,
    params: Vec<ParamEntry>,
    running: usize,
    adam: AdamHeader,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
    /// Update count per parameter; `None` when the parameter has no moments yet.
    updates: Vec<Option<u64>>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub adam: AdamState<f32>,
    pub step: u64,
    /// Caller-defined state, e.g. sampler position.
    pub extra: serde_json::Value,
}

fn push(out: &mut Vec<u8>, data: &[f32]) -> Result<()> {
    let t = Tensor::new(vec![data.len()], data.to_vec())?;
    out.extend(encode(&Container::from_tensor(&t))?);
    Ok(())
}

/// Writes atomically: a partially written file never replaces a good one.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    let moments = ckpt.adam.all_moments();
    let header = Header {
        digest: model.config.digest(),
        config: model.config.clone(),
        step: ckpt.step,
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                trainable: p.trainable,
            })
            .collect(),
        running: model.running.len(),
        adam: AdamHeader {
            config: ckpt.adam.config,
            step: ckpt.adam.step_count(),
            updates: (0..model.store.len())
                .map(|i| moments.get(i).and_then(|m| m.as_ref()).map(|m| m.updates))
                .collect(),
        },
        extra: ckpt.extra.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        out.extend(encode(&Container::from_tensor(&p.tensor))?);
    }
    for r in &model.running {
        push(&mut out, &r.mean)?;
        push(&mut out, &r.var)?;
    }
    for m in moments.iter().flatten() {
        push(&mut out, &m.m)?;
        push(&mut out, &m.v)?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. With `expected`, its config digest must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ArchitectureConfig>) -> Result<Checkpoint> {
    let ctx = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |kind, msg: String| Error::format(kind, ctx.clone(), msg);
    if bytes.len() < 9 {
        return Err(bad(FormatErrorKind::Truncated, "shorter than the checkpoint preamble".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(FormatErrorKind::BadMagic, "missing CBCK magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(bad(FormatErrorKind::UnsupportedVersion, format!("checkpoint version {}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = bytes
        .get(9..9 + len)
        .ok_or_else(|| bad(FormatErrorKind::Truncated, "header runs past end of file".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Json {
        context: ctx.clone(),
        source: e,
    })?;
    if header.config.digest() != header.digest {
        return Err(bad(FormatErrorKind::Malformed, "config does not hash to its recorded digest".into()));
    }
    if let Some(cfg) = expected {
        if cfg.digest() != header.digest {
            return Err(Error::Config(format!(
                "checkpoint {ctx} was written for a different architecture (digest {} vs {})",
                header.digest,
                cfg.digest()
            )));
        }
    }
    let mut model = ModelGraph::build(&header.config, 0)?;
    if model.store.len() != header.params.len() || model.running.len() != header.running {
        return Err(bad(FormatErrorKind::Malformed, "parameter layout does not match the config".into()));
    }
    let mut pos = 9 + len;
    let mut next = |what: &str| -> Result<Tensor<f32>> {
        let (c, used) = decode_prefix(&bytes[pos..], &format!("{ctx}: {what}"))?;
        pos += used;
        c.into_tensor(what)
    };
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let t = next(&entry.name)?;
        let p = model.store.get_mut(id);
        if p.name != entry.name || p.tensor.shape() != t.shape() {
            return Err(bad(FormatErrorKind::Malformed, format!("parameter {} does not fit the model", entry.name)));
        }
        p.tensor = t;
        p.trainable = entry.trainable;
    }
    for (i, r) in model.running.iter_mut().enumerate() {
        let mean = next(&format!("running mean {i}"))?.into_data();
        let var = next(&format!("running var {i}"))?.into_data();
        if mean.len() != r.mean.len() || var.len() != r.var.len() {
            return Err(bad(FormatErrorKind::Malformed, format!("running statistics {i} have the wrong width")));
        }
        r.mean = mean;
        r.var = var;
    }
    let mut moments = Vec::with_capacity(header.adam.updates.len());
    for (i, updates) in header.adam.updates.iter().enumerate() {
        moments.push(match updates {
            Some(u) => {
                let m = next(&format!("adam m {i}"))?.into_data();
                let v = next(&format!("adam v {i}"))?.into_data();
                let n = model.store.get(crate::autodiff::ParamId(i)).tensor.numel();
                if m.len() != n || v.len() != n {
                    return Err(bad(FormatErrorKind::Malformed, format!("adam moments {i} have the wrong length")));
                }
                Some(Moments { m, v, updates: *u })
            }
            None => None,
        });
    }
    if pos != bytes.len() {
        return Err(bad(FormatErrorKind::Malformed, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        model,
        adam: AdamState::restore(header.adam.config, header.adam.step, moments),
        step: header.step,
        extra: header.extra,
    })
}
