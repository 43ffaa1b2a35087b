//! Versioned checkpoint container.
//!
//! ```text
//! "G2S1"  u32 version  [32] model digest  u64 seed
//! u32 len + model text   u32 len + run config text
//! u32 count, arrays      (parameters)
//! u32 count, arrays      (optimizer and schedule state)
//! array: u32 name len, name, u32 rank, u64 extents.., little-endian f32 data
//! ```
//!
//! Scalars that live in `f64`/`u64` (learning rate, step, best perplexity)
//! are stored as two-element arrays holding the low and high 32 bits, so the
//! round trip is exact.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{OptimizerState, ScheduleState, TrainConfig, Trainer};
use crate::config::{hex, RunConfig};
use crate::error::{Error, Result};
use crate::model::{BidirModel, ModelConfig};
use crate::nn::Pooling;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"G2S1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    /// Raw 32-bit words.
    pub bits: Vec<u32>,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            bits: t.data().iter().map(|x| x.to_f32_lossy().to_bits()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.bits.iter().map(|&b| T::from_f32_bits(f32::from_bits(b))).collect())
    }

    pub fn from_u64(name: impl Into<String>, x: u64) -> Self {
        Self {
            name: name.into(),
            shape: vec![2],
            bits: vec![x as u32, (x >> 32) as u32],
        }
    }

    pub fn to_u64(&self) -> Result<u64> {
        if self.bits.len() != 2 {
            return Err(Error::Checkpoint(format!("`{}` is not a 64-bit scalar", self.name)));
        }
        Ok(self.bits[0] as u64 | (self.bits[1] as u64) << 32)
    }

    pub fn from_f64(name: impl Into<String>, x: f64) -> Self {
        Self::from_u64(name, x.to_bits())
    }

    pub fn to_f64(&self) -> Result<f64> {
        Ok(f64::from_bits(self.to_u64()?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub seed: u64,
    pub model_text: String,
    pub config_text: String,
    pub params: Vec<NamedArray>,
    pub state: Vec<NamedArray>,
}

/// Canonical description of the model shape; its SHA-256 is the checkpoint
/// digest.
pub fn model_text(m: &ModelConfig) -> String {
    format!(
        "src_vocab={}\ntgt_vocab={}\nd_model={}\nd_ff={}\nheads={}\nlayers={}\nd_cell={}\ntie_encoders={}\npooling={}\n",
        m.src_vocab, m.tgt_vocab, m.d_model, m.d_ff, m.heads, m.layers, m.d_cell, m.tie_encoders, m.pooling
    )
}

pub fn digest_of(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn parse_model_text(text: &str) -> Result<ModelConfig> {
    let kv: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Checkpoint(format!("model description lacks `{k}`")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`"))) };
    Ok(ModelConfig {
        src_vocab: num("src_vocab")?,
        tgt_vocab: num("tgt_vocab")?,
        d_model: num("d_model")?,
        d_ff: num("d_ff")?,
        heads: num("heads")?,
        layers: num("layers")?,
        d_cell: num("d_cell")?,
        tie_encoders: get("tie_encoders")? == "true",
        pooling: get("pooling")?.parse::<Pooling>().map_err(Error::Checkpoint)?,
    })
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_arrays(w: &mut Vec<u8>, arrays: &[NamedArray]) {
    put_u32(w, arrays.len() as u32);
    for a in arrays {
        put_str(w, &a.name);
        put_u32(w, a.shape.len() as u32);
        for &e in &a.shape {
            w.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &b in &a.bits {
            put_u32(w, b);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }

    fn arrays(&mut self) -> Result<Vec<NamedArray>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            if n > (self.buf.len() - self.pos) / 4 {
                return Err(Error::Checkpoint(format!("array `{name}` runs past the end of the file")));
            }
            let bits = (0..n).map(|_| self.u32()).collect::<Result<_>>()?;
            out.push(NamedArray { name, shape, bits });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, self.version);
        w.extend_from_slice(&self.digest);
        w.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut w, &self.model_text);
        put_str(&mut w, &self.config_text);
        put_arrays(&mut w, &self.params);
        put_arrays(&mut w, &self.state);
        w
    }

    /// Parses and verifies the digest against the embedded model text.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let seed = r.u64()?;
        let model_text = r.string()?;
        let config_text = r.string()?;
        let params = r.arrays()?;
        let state = r.arrays()?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after state".into()));
        }
        let found = digest_of(&model_text);
        if found != digest {
            return Err(Error::DigestMismatch {
                expected: hex(&digest),
                found: hex(&found),
            });
        }
        Ok(Self {
            version,
            digest,
            seed,
            model_text,
            config_text,
            params,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        parse_model_text(&self.model_text)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse_str(&self.config_text)
    }

    /// Fails with [`Error::DigestMismatch`] unless `expected` describes the
    /// stored model.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        let want = digest_of(&model_text(expected));
        if want != self.digest {
            return Err(Error::DigestMismatch {
                expected: hex(&want),
                found: hex(&self.digest),
            });
        }
        Ok(())
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn model<T: Scalar>(&self) -> Result<BidirModel<T>> {
        let mut model = BidirModel::new(self.model_config()?, self.seed)?;
        let by_name: HashMap<&str, &NamedArray> = self.params.iter().map(|a| (a.name.as_str(), a)).collect();
        if by_name.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                by_name.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let a = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            model
                .store
                .set(id, a.to_tensor()?)
                .map_err(|_| Error::Checkpoint(format!("parameter `{name}` has the wrong shape")))?;
        }
        Ok(model)
    }
}

/// Snapshot of a model alone (no optimizer state).
pub fn model_checkpoint<T: Scalar>(model: &BidirModel<T>, config: &RunConfig, seed: u64) -> Checkpoint {
    let model_text = model_text(&model.config);
    Checkpoint {
        version: VERSION,
        digest: digest_of(&model_text),
        seed,
        model_text,
        config_text: config.to_text(),
        params: model
            .store
            .ids()
            .map(|id| NamedArray::from_tensor(model.store.name(id), model.store.value(id)))
            .collect(),
        state: Vec::new(),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model, config, self.cfg.seed);
        let store = &self.model.store;
        let mut state = vec![
            NamedArray::from_u64("opt.step", self.opt.step),
            NamedArray::from_f64("opt.lr", self.opt.lr),
            NamedArray::from_f64("sched.best", self.schedule.best.unwrap_or(f64::NAN)),
            NamedArray::from_u64("sched.bad_checks", self.schedule.bad_checks as u64),
            NamedArray::from_u64("sched.decay_events", self.schedule.decay_events as u64),
            NamedArray::from_f64("train.loss_acc", self.loss_acc),
            NamedArray::from_u64("train.loss_count", self.loss_count),
        ];
        for id in store.ids() {
            state.push(NamedArray::from_tensor(format!("opt.m.{}", store.name(id)), &self.opt.m[id.index()]));
            state.push(NamedArray::from_tensor(format!("opt.v.{}", store.name(id)), &self.opt.v[id.index()]));
        }
        ck.state = state;
        ck
    }

    /// Restores model, optimizer and schedule. Training settings come from
    /// the embedded run config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let run = ck.run_config()?;
        let model = ck.model::<T>()?;
        let mut cfg = TrainConfig::from_run(&run);
        cfg.seed = ck.seed;
        let by_name: HashMap<&str, &NamedArray> = ck.state.iter().map(|a| (a.name.as_str(), a)).collect();
        let get = |n: &str| {
            by_name
                .get(n)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing state `{n}`")))
        };
        let mut opt = OptimizerState::new(&model.store, 0.0);
        opt.step = get("opt.step")?.to_u64()?;
        opt.lr = get("opt.lr")?.to_f64()?;
        for id in model.store.ids() {
            let name = model.store.name(id);
            for (prefix, slot) in [("opt.m.", &mut opt.m[id.index()]), ("opt.v.", &mut opt.v[id.index()])] {
                let t = get(&format!("{prefix}{name}"))?.to_tensor()?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("state `{prefix}{name}` has the wrong shape")));
                }
                *slot = t;
            }
        }
        let best = get("sched.best")?.to_f64()?;
        let schedule = ScheduleState {
            best: (!best.is_nan()).then_some(best),
            bad_checks: get("sched.bad_checks")?.to_u64()? as usize,
            patience: cfg.patience,
            decay: cfg.decay,
            decay_events: get("sched.decay_events")?.to_u64()? as usize,
        };
        Ok(Self {
            model,
            opt,
            schedule,
            cfg,
            loss_acc: get("train.loss_acc")?.to_f64()?,
            loss_count: get("train.loss_count")?.to_u64()?,
        })
    }
}
