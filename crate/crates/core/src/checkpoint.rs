//! Binary checkpoint format: magic `XIQA`, version 1, little-endian.
//!
//! Layout: header, model config, named parameter table (name, shape, raw f32
//! values), optional optimizer moments, rng state, then training metadata.
//! Serialization is canonical, so save -> load -> save reproduces the file
//! byte for byte.

use std::path::Path;

use thiserror::Error;

use crate::eval::SplitPlan;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{AdamWConfig, Moments, OptimState};

pub const MAGIC: [u8; 4] = *b"XIQA";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u16),
    #[error("checkpoint truncated at byte {0}")]
    TruncatedFile(usize),
    #[error("shape table mismatch: {0}")]
    ShapeTableMismatch(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSnapshot {
    pub step_count: u64,
    pub cfg: AdamWConfig,
    pub entries: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub loss_history: Vec<f32>,
    /// (mean, std) used to z-normalize scores during fine-tuning.
    pub score_norm: Option<(f64, f64)>,
    pub split: Option<SplitPlan>,
    pub extra: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub optim: Option<OptimSnapshot>,
    pub rng: RngState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer) into checkpoint form.
    pub fn capture(
        model: &ModelParams<f32>,
        optim: Option<&OptimState<f32>>,
        rng: &rand_chacha::ChaCha8Rng,
        meta: CheckpointMeta,
    ) -> Self {
        let params = model
            .parameters()
            .iter()
            .map(|p| NamedTensor {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                values: p.values().clone(),
            })
            .collect();
        let optim = optim.map(|o| OptimSnapshot {
            step_count: o.step_count,
            cfg: o.cfg.clone(),
            entries: o
                .entries()
                .iter()
                .map(|m| (m.name.clone(), m.m.clone(), m.v.clone()))
                .collect(),
        });
        Checkpoint {
            config: model.cfg.clone(),
            params,
            optim,
            rng: RngState::capture(rng),
            meta,
        }
    }

    /// Rebuild a model from the stored parameter table, validating names and
    /// shapes against the stored config.
    pub fn build_model(&self) -> Result<ModelParams<f32>, CheckpointError> {
        let model = ModelParams::<f32>::init(&self.config, 0);
        let expected = model.parameters();
        if expected.len() != self.params.len() {
            return Err(CheckpointError::ShapeTableMismatch(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (stored, param) in self.params.iter().zip(expected) {
            if stored.name != param.name() {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "parameter {} where {} expected",
                    stored.name,
                    param.name()
                )));
            }
            if stored.shape != param.shape() {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    stored.name,
                    stored.shape,
                    param.shape()
                )));
            }
            param.set_values(stored.values.clone());
        }
        Ok(model)
    }

    /// Rebuild the optimizer moments over `params`, which must be the same
    /// trainable list the state was captured from.
    pub fn build_optim(
        &self,
        params: &[&crate::tensor::Parameter<f32>],
    ) -> Result<Option<OptimState<f32>>, CheckpointError> {
        let Some(snapshot) = &self.optim else {
            return Ok(None);
        };
        if snapshot.entries.len() != params.len() {
            return Err(CheckpointError::ShapeTableMismatch(format!(
                "{} optimizer entries for {} parameters",
                snapshot.entries.len(),
                params.len()
            )));
        }
        let mut state = OptimState::new(params, snapshot.cfg.clone());
        let entries = snapshot
            .entries
            .iter()
            .zip(params)
            .map(|((name, m, v), p)| {
                if name != p.name() || m.len() != p.numel() {
                    return Err(CheckpointError::ShapeTableMismatch(format!(
                        "optimizer entry {name} does not match parameter {}",
                        p.name()
                    )));
                }
                Ok(Moments {
                    name: name.clone(),
                    m: m.clone(),
                    v: v.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        state.restore(snapshot.step_count, entries);
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u16(VERSION);
        let c = &self.config;
        for v in [
            c.image_size,
            c.patch_size,
            c.channels,
            c.embed_dim,
            c.num_heads,
            c.encoder_depth,
            c.decoder_depth,
        ] {
            w.u32(v as u32);
        }
        w.f64(c.mlp_ratio);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str16(&p.name);
            w.u8(p.shape.len() as u8);
            for &d in &p.shape {
                w.u32(d as u32);
            }
            for &v in &p.values {
                w.f32(v);
            }
        }
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.step_count);
                w.f64(o.cfg.lr);
                w.f64(o.cfg.beta1);
                w.f64(o.cfg.beta2);
                w.f64(o.cfg.eps);
                w.f64(o.cfg.weight_decay);
                w.u32(o.entries.len() as u32);
                for (name, m, v) in &o.entries {
                    w.str16(name);
                    w.u32(m.len() as u32);
                    for &x in m {
                        w.f32(x);
                    }
                    for &x in v {
                        w.f32(x);
                    }
                }
            }
        }
        w.bytes(&self.rng.seed);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u64(self.rng.stream);
        w.u32(self.meta.epoch);
        w.u32(self.meta.loss_history.len() as u32);
        for &v in &self.meta.loss_history {
            w.f32(v);
        }
        match self.meta.score_norm {
            None => w.u8(0),
            Some((mean, std)) => {
                w.u8(1);
                w.f64(mean);
                w.f64(std);
            }
        }
        match &self.meta.split {
            None => w.u8(0),
            Some(split) => {
                w.u8(1);
                w.f64(split.fraction);
                w.u64(split.seed);
                for refs in [&split.train_refs, &split.test_refs] {
                    w.u32(refs.len() as u32);
                    for r in refs {
                        w.str16(r);
                    }
                }
            }
        }
        w.u32(self.meta.extra.len() as u32);
        for (k, v) in &self.meta.extra {
            w.str16(k);
            w.str16(v);
        }
        w.out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::VersionUnsupported(version));
        }
        let config = ModelConfig {
            image_size: r.u32()? as usize,
            patch_size: r.u32()? as usize,
            channels: r.u32()? as usize,
            embed_dim: r.u32()? as usize,
            num_heads: r.u32()? as usize,
            encoder_depth: r.u32()? as usize,
            decoder_depth: r.u32()? as usize,
            mlp_ratio: r.f64()?,
        };
        let param_count = r.u32()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let name = r.str16()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > (1 << 31) {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "{name}: implausible element count {numel}"
                )));
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f32()?);
            }
            params.push(NamedTensor {
                name,
                shape,
                values,
            });
        }
        let optim = match r.u8()? {
            0 => None,
            1 => {
                let step_count = r.u64()?;
                let cfg = AdamWConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let entry_count = r.u32()? as usize;
                let mut entries = Vec::with_capacity(entry_count);
                for _ in 0..entry_count {
                    let name = r.str16()?;
                    let numel = r.u32()? as usize;
                    let mut m = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        m.push(r.f32()?);
                    }
                    let mut v = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        v.push(r.f32()?);
                    }
                    entries.push((name, m, v));
                }
                Some(OptimSnapshot {
                    step_count,
                    cfg,
                    entries,
                })
            }
            other => {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "bad optimizer flag {other}"
                )))
            }
        };
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let mut wp = [0u8; 16];
        wp.copy_from_slice(r.take(16)?);
        let rng = RngState {
            seed,
            word_pos: u128::from_le_bytes(wp),
            stream: r.u64()?,
        };
        let epoch = r.u32()?;
        let hist_len = r.u32()? as usize;
        let mut loss_history = Vec::with_capacity(hist_len);
        for _ in 0..hist_len {
            loss_history.push(r.f32()?);
        }
        let score_norm = match r.u8()? {
            0 => None,
            1 => Some((r.f64()?, r.f64()?)),
            other => {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "bad score-norm flag {other}"
                )))
            }
        };
        let split = match r.u8()? {
            0 => None,
            1 => {
                let fraction = r.f64()?;
                let seed = r.u64()?;
                let mut lists = [Vec::new(), Vec::new()];
                for list in &mut lists {
                    let len = r.u32()? as usize;
                    for _ in 0..len {
                        list.push(r.str16()?);
                    }
                }
                let [train_refs, test_refs] = lists;
                Some(SplitPlan {
                    train_refs,
                    test_refs,
                    fraction,
                    seed,
                })
            }
            other => {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "bad split flag {other}"
                )))
            }
        };
        let extra_count = r.u32()? as usize;
        let mut extra = Vec::with_capacity(extra_count);
        for _ in 0..extra_count {
            let k = r.str16()?;
            let v = r.str16()?;
            extra.push((k, v));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::ShapeTableMismatch(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            optim,
            rng,
            meta: CheckpointMeta {
                epoch,
                loss_history,
                score_norm,
                split,
                extra,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str16(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize);
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::TruncatedFile(self.pos));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str16(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::ShapeTableMismatch("non-utf8 name".into()))
    }
}
