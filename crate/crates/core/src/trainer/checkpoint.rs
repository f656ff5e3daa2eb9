//! Little-endian binary checkpoint:
//!
//! ```text
//! b"LIFTCKPT"  u32 version  u64 metadata length  metadata JSON
//! f32 parameters in declaration order
//! f64 betas, alphas, alpha_bars, posterior_betas
//! f32 Adam first moments, then second moments
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig, TrainState};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::pose::SkeletonSpec;
use crate::schedule::DiffusionSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LIFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: DenoiserConfig,
    train: TrainConfig,
    skeleton: SkeletonSpec,
    epoch: usize,
    adam_step: u64,
    schedule_steps: usize,
    tensors: Vec<TensorInfo>,
    history: Vec<EpochMetrics>,
}

fn put_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_f64(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let tensors = state.model.tensors();
    let meta = Metadata {
        model: state.model.config().clone(),
        train: state.config.clone(),
        skeleton: state.skeleton.clone(),
        epoch: state.epoch,
        adam_step: state.optimizer.step,
        schedule_steps: state.schedule.steps(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        put_f32(&mut out, t);
    }
    let s = &state.schedule;
    for arr in [s.betas(), s.alphas(), s.alpha_bars(), s.posterior_betas()] {
        put_f64(&mut out, arr);
    }
    for m in &state.optimizer.m {
        put_f32(&mut out, m);
    }
    for v in &state.optimizer.v {
        put_f32(&mut out, v);
    }
    Ok(out)
}

/// Writes through a temporary file so an interrupted save leaves any
/// previous checkpoint intact.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8, "metadata length")?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(r.take(len, "metadata")?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

    let mut model = DenoiserModel::<f32>::init(meta.model.clone(), 0)
        .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
    let names: Vec<(String, usize)> = model
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    if names.len() != meta.tensors.len()
        || names
            .iter()
            .zip(&meta.tensors)
            .any(|((n, l), info)| *n != info.name || *l != info.len)
    {
        return Err(Error::Format("checkpoint tensor list does not match its model config".into()));
    }
    for (dst, info) in model.tensors_mut().into_iter().zip(&meta.tensors) {
        dst.copy_from_slice(&r.f32s(info.len, &info.name)?);
    }
    if !model.is_finite() {
        return Err(Error::Format("checkpoint parameters are not finite".into()));
    }

    let t = meta.schedule_steps;
    let betas = r.f64s(t, "betas")?;
    let alphas = r.f64s(t, "alphas")?;
    let alpha_bars = r.f64s(t, "alpha_bars")?;
    let posterior = r.f64s(t, "posterior_betas")?;
    let schedule = DiffusionSchedule::from_arrays(betas, alphas, alpha_bars, posterior)?;

    let sizes: Vec<usize> = meta.tensors.iter().map(|i| i.len).collect();
    let mut optimizer = AdamState::new(meta.train.adam, &sizes);
    optimizer.step = meta.adam_step;
    for (m, info) in optimizer.m.iter_mut().zip(&meta.tensors) {
        *m = r.f32s(info.len, "adam first moment")?;
    }
    for (v, info) in optimizer.v.iter_mut().zip(&meta.tensors) {
        *v = r.f32s(info.len, "adam second moment")?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(TrainState {
        model,
        schedule,
        config: meta.train,
        skeleton: meta.skeleton,
        optimizer,
        epoch: meta.epoch,
        history: meta.history,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
