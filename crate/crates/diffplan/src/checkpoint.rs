//! Binary checkpoints for planner parameters and optimizer state.
//!
//! Layout: the magic `ckpt-v1\n`, a little-endian u64 JSON length, a JSON
//! metadata block (model shape, optimizer scalars, array lengths), then the
//! numeric payload as raw little-endian f64 arrays in a fixed order:
//! parameters, Adam first and second moments, normalizer mean and std, and
//! the four schedule arrays. Raw bit copies make save/load round trips
//! byte-exact, so training can resume without any drift.

use crate::denoiser::{DenoiserParams, OptimizerState};
use crate::diffusion::{ModelConfig, NoiseSchedule, Normalizer, Planner};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ckpt-v1\n";

/// Everything needed to resume or evaluate a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub planner: Planner,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    opt_step: u64,
    opt_lr: f64,
    opt_beta1: f64,
    opt_beta2: f64,
    opt_eps: f64,
    n_params: usize,
    plan_dim: usize,
    k_steps: usize,
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(input: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect())
}

pub fn save_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<()> {
    let planner = &ckpt.planner;
    let opt = &ckpt.optimizer;
    if planner.params.len() != opt.m.len() {
        return Err(Error::ShapeMismatch("optimizer state does not match parameter count".into()));
    }
    let meta = CheckpointMeta {
        model: planner.model.clone(),
        opt_step: opt.step,
        opt_lr: opt.lr,
        opt_beta1: opt.beta1,
        opt_beta2: opt.beta2,
        opt_eps: opt.eps,
        n_params: planner.params.len(),
        plan_dim: planner.normalizer.dim(),
        k_steps: planner.schedule.k_steps(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    out.write_all(MAGIC)?;
    out.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&meta_bytes)?;
    write_f64s(&mut out, &planner.params.flat)?;
    write_f64s(&mut out, &opt.m)?;
    write_f64s(&mut out, &opt.v)?;
    write_f64s(&mut out, &planner.normalizer.mean)?;
    write_f64s(&mut out, &planner.normalizer.std)?;
    write_f64s(&mut out, &planner.schedule.betas)?;
    write_f64s(&mut out, &planner.schedule.alphas)?;
    write_f64s(&mut out, &planner.schedule.alpha_bars)?;
    write_f64s(&mut out, &planner.schedule.beta_tildes)?;
    Ok(())
}

pub fn save_checkpoint_file<P: AsRef<Path>>(path: P, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    save_checkpoint(&mut writer, ckpt)?;
    writer.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a ckpt-v1 checkpoint".into()));
    }
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    if meta_len > 16 * 1024 * 1024 {
        return Err(Error::Format("checkpoint metadata implausibly large".into()));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    input.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
    meta.model.validate()?;
    if meta.model.arch().param_count() != meta.n_params {
        return Err(Error::Format("checkpoint parameter count does not match its model".into()));
    }
    if meta.model.plan_dim() != meta.plan_dim {
        return Err(Error::Format("checkpoint normalizer width does not match its model".into()));
    }

    let params = DenoiserParams { flat: read_f64s(&mut input, meta.n_params)? };
    let m = read_f64s(&mut input, meta.n_params)?;
    let v = read_f64s(&mut input, meta.n_params)?;
    let mean = read_f64s(&mut input, meta.plan_dim)?;
    let std = read_f64s(&mut input, meta.plan_dim)?;
    let k = meta.k_steps + 1;
    let betas = read_f64s(&mut input, k)?;
    let alphas = read_f64s(&mut input, k)?;
    let alpha_bars = read_f64s(&mut input, k)?;
    let beta_tildes = read_f64s(&mut input, k)?;

    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }

    Ok(Checkpoint {
        planner: Planner {
            params,
            model: meta.model,
            normalizer: Normalizer { mean, std },
            schedule: NoiseSchedule { betas, alphas, alpha_bars, beta_tildes },
        },
        optimizer: OptimizerState {
            m,
            v,
            step: meta.opt_step,
            lr: meta.opt_lr,
            beta1: meta.opt_beta1,
            beta2: meta.opt_beta2,
            eps: meta.opt_eps,
        },
    })
}

pub fn load_checkpoint_file<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    load_checkpoint(std::io::BufReader::new(file))
}
