//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCNN" | u32 version | u32 len, config text | u32 n, n × record
//! | u8 has_optimizer [ | u32 len, optimizer text | u32 n, n × record ]
//! record = u32 name len | name | u8 dtype | u32 rank | rank × u64 extent | values
//! ```
//!
//! The config text is a [`KvMap`] holding the model config (`model.*`), the
//! surgery tag (`surgery.*`) and free-form run metadata (`run.*`). Records
//! are parameters followed by buffers (`*.running_mean`, `*.running_var`).
//! Optimizer slots are stored as `m/<param>` and `v/<param>`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::KvMap;
use crate::model::{build_cnn, ModelConfig, ModelGraph};
use crate::reparam::{transform_last_stage_with, InitMode};
use crate::tensor::{DType, Element, Tensor};
use crate::train::{OptimizerState, Slot};

pub const MAGIC: &[u8; 4] = b"TCNN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Element> {
    pub model: ModelGraph<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// `run.*` entries with the prefix stripped.
    pub meta: KvMap,
}

struct Record<'a> {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    payload: &'a [u8],
}

impl Record<'_> {
    fn values<T: Element>(&self) -> Vec<T> {
        let n = self.dtype.size_of();
        self.payload
            .chunks_exact(n)
            .map(|c| match self.dtype {
                DType::F32 => T::c(f32::read_le(c) as f64),
                DType::F64 => T::c(f64::read_le(c)),
            })
            .collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, text: &str) {
    put_u32(out, text.len());
    out.extend_from_slice(text.as_bytes());
}

fn put_record<T: Element>(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[T]) {
    put_text(out, name);
    out.push(T::DTYPE.tag());
    put_u32(out, shape.len());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in values {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<V>(&self, msg: impl Into<String>) -> Result<V> {
        Err(Error::Format { offset: self.pos as u64, msg: msg.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format { offset: at as u64, msg: format!("{what} is not utf-8") })
    }

    fn record(&mut self) -> Result<Record<'a>> {
        let name = self.text("record name")?;
        let at = self.pos;
        let tag = self.u8("dtype")?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format { offset: at as u64, msg: format!("unknown dtype tag {tag}") })?;
        let rank = self.u32("rank")?;
        if rank > 8 {
            return self.fail(format!("rank {rank} of {name} is implausible"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|c| c.checked_mul(dtype.size_of()));
        let Some(len) = count else {
            return self.fail(format!("extents of {name} overflow"));
        };
        let payload = self.take(len, &format!("payload of {name}"))?;
        Ok(Record { name, dtype, shape, payload })
    }

    fn records(&mut self) -> Result<Vec<Record<'a>>> {
        let n = self.u32("record count")?;
        let mut out: Vec<Record<'a>> = Vec::new();
        for _ in 0..n {
            let at = self.pos;
            let r = self.record()?;
            if out.iter().any(|o| o.name == r.name) {
                return Err(Error::Format { offset: at as u64, msg: format!("duplicate record {}", r.name) });
            }
            out.push(r);
        }
        Ok(out)
    }
}

fn config_text<T: Element>(model: &ModelGraph<T>, meta: &KvMap) -> KvMap {
    let mut kv = model.config.to_kv();
    if let Some(tag) = model.surgery {
        kv.set("surgery.kind", tag.kind).set("surgery.downsample", tag.downsample);
    }
    for k in meta.keys() {
        kv.set(&format!("run.{k}"), meta.get(k).expect("key from iterator"));
    }
    kv
}

/// Serializes a model, optional optimizer state and run metadata.
pub fn encode<T: Element>(model: &ModelGraph<T>, optimizer: Option<&OptimizerState<T>>, meta: &KvMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_text(&mut out, &config_text(model, meta).to_string());
    let tensors: Vec<(String, Tensor<T>)> = model.named_params().into_iter().chain(model.named_buffers()).collect();
    put_u32(&mut out, tensors.len());
    for (name, t) in &tensors {
        put_record(&mut out, name, t.shape(), t.data());
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            let mut kv = KvMap::new();
            kv.set("kind", state.kind).set("step", state.step);
            put_text(&mut out, &kv.to_string());
            let mut slots = Vec::new();
            for (name, slot) in &state.slots {
                slots.push((format!("m/{name}"), &slot.m));
                if !slot.v.is_empty() {
                    slots.push((format!("v/{name}"), &slot.v));
                }
            }
            put_u32(&mut out, slots.len());
            for (name, values) in slots {
                put_record(&mut out, &name, &[values.len()], values);
            }
        }
    }
    out
}

/// Rebuilds the graph described by a config blob, untrained.
fn skeleton<T: Element>(kv: &KvMap) -> Result<ModelGraph<T>> {
    let config = ModelConfig::from_kv(kv)?;
    let model = build_cnn::<T>(&config)?;
    match kv.get_parsed("surgery.kind")? {
        None => Ok(model),
        Some(kind) => {
            let downsample = kv.require("surgery.downsample")?;
            Ok(transform_last_stage_with(&model, &InitMode::structural(kind), downsample)?.0)
        }
    }
}

/// Parses a checkpoint. Values stored in the other precision are converted.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, not a TCNN checkpoint".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let at = r.pos;
    let kv = KvMap::parse(&r.text("config")?)
        .map_err(|e| Error::Format { offset: at as u64, msg: format!("config: {e}") })?;
    let records = r.records()?;

    let mut model: ModelGraph<T> = skeleton(&kv)?;
    let params = model.named_params();
    let buffers = model.named_buffers();
    if records.len() != params.len() + buffers.len() {
        return Err(Error::Format {
            offset: at as u64,
            msg: format!("{} records for a graph with {} tensors", records.len(), params.len() + buffers.len()),
        });
    }
    for rec in &records {
        let value = Tensor::from_vec(rec.values::<T>(), &rec.shape)?;
        if params.iter().any(|(n, _)| *n == rec.name) {
            model.set_param(&rec.name, value)?;
        } else {
            model.set_buffer(&rec.name, &value)?;
        }
    }

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let at = r.pos;
            let okv = KvMap::parse(&r.text("optimizer config")?)
                .map_err(|e| Error::Format { offset: at as u64, msg: format!("optimizer config: {e}") })?;
            let mut state = OptimizerState::new(okv.require("kind")?);
            state.step = okv.require("step")?;
            for rec in r.records()? {
                let values = rec.values::<T>();
                let (which, name) = rec
                    .name
                    .split_once('/')
                    .ok_or_else(|| Error::Format { offset: r.pos as u64, msg: format!("bad slot name {}", rec.name) })?;
                let slot = state.slots.entry(name.to_string()).or_insert_with(Slot::default);
                match which {
                    "m" => slot.m = values,
                    "v" => slot.v = values,
                    _ => return r.fail(format!("bad slot name {}", rec.name)),
                }
            }
            Some(state)
        }
        f => return r.fail(format!("bad optimizer flag {f}")),
    };
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint { model, optimizer, meta: kv.section("run") })
}

/// Precision of the first tensor record.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, not a TCNN checkpoint".into() });
    }
    r.u32("version")?;
    r.text("config")?;
    r.u32("record count")?;
    Ok(r.record()?.dtype)
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    model: &ModelGraph<T>,
    optimizer: Option<&OptimizerState<T>>,
    meta: &KvMap,
) -> Result<()> {
    std::fs::write(path, encode(model, optimizer, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::transform_last_stage;

    fn tiny() -> ModelGraph<f64> {
        build_cnn(&ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = tiny();
        let mut meta = KvMap::new();
        meta.set("mean", "0.5,0.5,0.5");
        let a = encode(&m, None, &meta);
        let back = decode::<f64>(&a).unwrap();
        assert_eq!(back.meta.get("mean"), Some("0.5,0.5,0.5"));
        assert_eq!(encode(&back.model, None, &back.meta), a);
    }

    #[test]
    fn transformed_round_trip() {
        let (t, _) = transform_last_stage(&tiny(), &InitMode::paper()).unwrap();
        let a = encode(&t, None, &KvMap::new());
        let back = decode::<f64>(&a).unwrap();
        assert_eq!(back.model.surgery, t.surgery);
        assert_eq!(back.model.gpsa_layers().len(), t.gpsa_layers().len());
        assert_eq!(encode(&back.model, None, &KvMap::new()), a);
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let a = encode(&tiny(), None, &KvMap::new());
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = a.clone();
        bad[4] = 9;
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [2, 10, a.len() / 2, a.len() - 1] {
            match decode::<f64>(&a[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn stored_precision() {
        let m = tiny();
        assert_eq!(stored_dtype(&encode(&m, None, &KvMap::new())).unwrap(), DType::F64);
        let f: ModelGraph<f32> = m.cast().unwrap();
        let bytes = encode(&f, None, &KvMap::new());
        assert_eq!(stored_dtype(&bytes).unwrap(), DType::F32);
        let up = decode::<f64>(&bytes).unwrap();
        let down: ModelGraph<f32> = up.model.cast().unwrap();
        assert_eq!(encode(&down, None, &KvMap::new()), bytes);
    }
}
