use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::condition::build_condition;
use super::config::LossWeights;
use super::loss::{loss_and_grads, TrainingSample};
use super::unet::Denoiser;
use crate::diffusion::{adamw_step, cosine_schedule, ema_update, forward_sample, AdamWConfig, NoiseSchedule, OptimizerState};
use crate::error::{Result, SalientError};
use crate::morph::{Mask, Mask3};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::wavelet::{dwt2, Slice, WaveletCoeffs};

/// A clean slice, its lesion mask and the neighbour slices at the configured
/// offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionExample<T> {
    pub slice: Slice<T>,
    pub mask: Mask,
    pub neighbors: Vec<Slice<T>>,
}

/// Cut a `d x h x w` z-major volume into per-slice examples. Offsets that
/// fall outside the volume reuse the centre slice.
pub fn examples_from_volume<T: Scalar>(
    volume: &[T],
    mask: &Mask3,
    offsets: &[i32],
    lesion_slices_only: bool,
) -> Result<Vec<DiffusionExample<T>>> {
    let (d, h, w) = (mask.d, mask.h, mask.w);
    if volume.len() != d * h * w {
        return Err(SalientError::dim("volume and mask sizes differ"));
    }
    let n = h * w;
    let slice = |z: usize| Slice { h, w, data: volume[z * n..(z + 1) * n].to_vec() };
    let mut out = Vec::new();
    for z in 0..d {
        let m = mask.slice(z);
        if lesion_slices_only && m.is_empty() {
            continue;
        }
        let neighbors = offsets
            .iter()
            .map(|&o| {
                let zz = z as i64 + o as i64;
                if zz >= 0 && (zz as usize) < d {
                    slice(zz as usize)
                } else {
                    slice(z)
                }
            })
            .collect();
        out.push(DiffusionExample { slice: slice(z), mask: m, neighbors });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dropout {
    Keep,
    Neighbors,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    pub p_drop_all: f64,
    pub p_drop_neighbors: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self { p_drop_all: 0.1, p_drop_neighbors: 0.1 }
    }
}

/// One uniform draw per batch: `[0, p_all)` drops everything,
/// `[p_all, p_all + p_nei)` drops the neighbours.
pub fn draw_dropout<R: Rng>(rng: &mut R, cfg: &DropoutConfig) -> Dropout {
    let u: f64 = rng.random();
    if u < cfg.p_drop_all {
        Dropout::All
    } else if u < cfg.p_drop_all + cfg.p_drop_neighbors {
        Dropout::Neighbors
    } else {
        Dropout::Keep
    }
}

pub fn normal_like<T: Scalar, R: Rng>(rng: &mut R, h: usize, w: usize) -> WaveletCoeffs<T> {
    WaveletCoeffs { h, w, data: (0..4 * h * w).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect() }
}

/// Corrupt an example to timestep `t` with noise `eps`.
pub fn make_sample<T: Scalar>(
    ex: &DiffusionExample<T>,
    t: usize,
    eps: &WaveletCoeffs<T>,
    dropout: Dropout,
    sched: &NoiseSchedule,
    detail_bands: bool,
) -> Result<TrainingSample<T>> {
    let w0 = dwt2(&ex.slice)?;
    let w_t = forward_sample(&w0, t, eps, sched)?;
    let cond = build_condition(
        &ex.mask,
        &ex.neighbors,
        dropout != Dropout::Keep,
        dropout == Dropout::All,
        detail_bands,
    )?;
    Ok(TrainingSample { w_t, t, cond, w0, mask: ex.mask.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub timesteps: usize,
    pub schedule_offset: f64,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub dropout: DropoutConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1200,
            batch_size: 4,
            timesteps: 200,
            schedule_offset: 0.008,
            optimizer: AdamWConfig { lr: 2e-3, ..AdamWConfig::default() },
            ema_decay: 0.999,
            dropout: DropoutConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub drop_all_batches: usize,
    pub drop_neighbor_batches: usize,
}

impl TrainReport {
    pub fn batches(&self) -> usize {
        self.losses.len()
    }
}

#[derive(Clone, Debug)]
pub struct TrainedDenoiser<T> {
    pub params: ParamTree<T>,
    pub ema: ParamTree<T>,
    pub report: TrainReport,
}

/// AdamW with cosine decay; the EMA decay ramps up as `(1 + k) / (10 + k)`
/// until it reaches the configured value.
pub fn train_denoiser<T: Scalar>(
    den: &Denoiser,
    examples: &[DiffusionExample<T>],
    init: ParamTree<T>,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainedDenoiser<T>> {
    if examples.is_empty() {
        return Err(SalientError::Config("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(SalientError::Config("batch_size must be positive".into()));
    }
    let sched = cosine_schedule(cfg.timesteps, cfg.schedule_offset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut ema = params.clone();
    let mut opt = OptimizerState::new(&params, AdamWConfig { total_steps: cfg.iterations, ..cfg.optimizer });
    let mut report = TrainReport::default();
    let detail = den.config.neighbor_detail_bands;
    for k in 0..cfg.iterations {
        let dropout = draw_dropout(&mut rng, &cfg.dropout);
        match dropout {
            Dropout::All => report.drop_all_batches += 1,
            Dropout::Neighbors => report.drop_neighbor_batches += 1,
            Dropout::Keep => {}
        }
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            let t = rng.random_range(1..=sched.steps);
            let eps = normal_like::<T, _>(&mut rng, ex.slice.h / 2, ex.slice.w / 2);
            batch.push(make_sample(ex, t, &eps, dropout, &sched, detail)?);
        }
        let (loss, grads) = loss_and_grads(den, &batch, &params, weights)?;
        if !loss.is_finite() {
            return Err(SalientError::Numerical(format!("non-finite diffusion loss at iteration {}", k)));
        }
        adamw_step(&mut params, &grads, &mut opt)?;
        let decay = cfg.ema_decay.min((1.0 + k as f64) / (10.0 + k as f64));
        ema_update(&mut ema, &params, decay)?;
        report.losses.push(loss);
    }
    Ok(TrainedDenoiser { params, ema, report })
}
