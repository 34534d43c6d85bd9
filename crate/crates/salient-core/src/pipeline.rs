//! Glue between phantom cohorts and the trainable stages.

use crate::error::{Result, SalientError};
use crate::mask_vae::{resample_lesion, MaskVolume, VaeConfig};
use crate::model::{examples_from_volume, sample_slice, Denoiser, DiffusionExample, SamplerConfig};
use crate::params::ParamTree;
use crate::phantom::{derive_seed, PhantomSubject};
use crate::diffusion::NoiseSchedule;
use crate::wavelet::Slice;

/// Lesion-bearing slices of the positive subjects, with their neighbours.
pub fn lesion_examples(subjects: &[PhantomSubject], offsets: &[i32]) -> Result<Vec<DiffusionExample<f32>>> {
    let mut out = Vec::new();
    for s in subjects.iter().filter(|s| s.label == 1) {
        out.extend(examples_from_volume(&s.volume, &s.mask, offsets, true)?);
    }
    if out.is_empty() {
        return Err(SalientError::Config("cohort has no lesion slices".into()));
    }
    Ok(out)
}

/// Lesion masks of the positive subjects resampled to the VAE grid.
pub fn vae_volumes(subjects: &[PhantomSubject], cfg: &VaeConfig) -> Result<Vec<MaskVolume>> {
    let out = subjects
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| resample_lesion(&s.mask, cfg.depth, cfg.height, cfg.width))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(SalientError::Config("cohort has no positive subjects".into()));
    }
    Ok(out)
}

/// One sample per example, conditioned on its mask and neighbours.
pub fn sample_like(
    den: &Denoiser,
    params: &ParamTree<f32>,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    examples: &[DiffusionExample<f32>],
    seed: u64,
) -> Result<Vec<Slice<f32>>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| sample_slice(den, params, sched, &ex.mask, &ex.neighbors, sampler, derive_seed(seed, i as u64)))
        .collect()
}
