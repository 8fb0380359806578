//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DAMO" version
//! len  key-value text (model config, optimizer step, `meta.*` entries)
//! count
//! count x { len name  rank  extents...  f32 data... }
//! ```
//!
//! Model parameters come first in storage order, then optional Adam moments
//! named `adam.m.<param>` / `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{parse_kv, parse_num, write_kv, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DAMO";
pub const FORMAT_VERSION: u32 = 1;

const META_PREFIX: &str = "meta.";
const STEP_KEY: &str = "optimizer.step";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Free-form entries saved beside the config (tokenizer, RNG state, ...).
    pub metadata: BTreeMap<String, String>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            metadata: BTreeMap::new(),
            optimizer: None,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let mut kv = model.config().to_kv();
    for (k, v) in &ckpt.metadata {
        if k.contains('\n') || v.contains('\n') || k.contains('=') {
            return Err(Error::Checkpoint(format!("metadata entry `{k}` is not a single key = value line")));
        }
        kv.insert(format!("{META_PREFIX}{k}"), v.clone());
    }
    if let Some(opt) = &ckpt.optimizer {
        kv.insert(STEP_KEY.into(), opt.step.to_string());
    }
    let text = write_kv(&kv);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());

    let params = model.params();
    let extra = if ckpt.optimizer.is_some() { 2 * params.len() } else { 0 };
    put_u32(&mut out, params.len() + extra)?;
    for (_, name, t) in params.iter() {
        put_tensor(&mut out, name, t.shape(), t.data())?;
    }
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for ((_, name, t), m) in params.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), m)?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let kv = parse_kv(&r.string()?)?;
    let config = ModelConfig::from_kv(&kv)?;
    config.validate()?;
    let mut metadata = BTreeMap::new();
    let mut step = None;
    for (k, v) in &kv {
        if let Some(rest) = k.strip_prefix(META_PREFIX) {
            metadata.insert(rest.to_string(), v.clone());
        } else if k == STEP_KEY {
            step = Some(parse_num::<u64>(k, v)?);
        }
    }

    let expected = Model::expected_shapes(&config);
    let shapes: BTreeMap<&str, &[usize]> = expected.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    let count = r.u32()?;
    let want = expected.len() * if step.is_some() { 3 } else { 1 };
    if count != want {
        return Err(Error::Checkpoint(format!("{count} tensors stored, {want} expected")));
    }

    let mut store = ParamStore::new();
    let mut moments: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let base = name
            .strip_prefix("adam.m.")
            .or_else(|| name.strip_prefix("adam.v."))
            .filter(|_| step.is_some())
            .unwrap_or(&name);
        let want = shapes
            .get(base)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if shape != *want {
            return Err(Error::ShapeMismatch {
                name,
                expected: want.to_vec(),
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if base.len() == name.len() {
            store.insert(name, Tensor::new(shape, data, config.precision)?)?;
        } else if moments.insert(name.clone(), data).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let model = Model::from_params(config, store)?;
    let optimizer = match step {
        None => None,
        Some(step) => {
            let mut take = |prefix: &str| -> Result<Vec<Vec<f64>>> {
                model
                    .params()
                    .iter()
                    .map(|(_, name, _)| {
                        moments
                            .remove(&format!("{prefix}{name}"))
                            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))
                    })
                    .collect()
            };
            let m = take("adam.m.")?;
            let v = take("adam.v.")?;
            Some(AdamState { step, m, v })
        }
    };
    Ok(Checkpoint {
        model,
        metadata,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
