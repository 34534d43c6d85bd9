//! Synthetic lesion pairs: VAE mask volumes are sliced into conditioning
//! masks, each mask drives the sampler with a real negative subject as 2.5D
//! context, and the conditioning mask is adopted as the label.

use crate::error::{Result, SalientError};
use crate::mask_vae::{slice_conditioning_masks, MaskVae, MaskVolume};
use crate::model::{sample_slice, Denoiser, SamplerConfig};
use crate::params::ParamTree;
use crate::phantom::{derive_seed, pair_synthetic, PairedSample, PhantomSubject};
use crate::diffusion::NoiseSchedule;
use crate::morph::Mask3;
use crate::phantom::SalvVolume;
use crate::wavelet::Slice;

/// Trained generator pieces needed to draw synthetic pairs.
pub struct Generator<'a> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamTree<f32>,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerConfig,
    pub vae: &'a MaskVae,
    pub vae_params: &'a ParamTree<f32>,
}

/// Neighbour slices of `host` around axial position `z` at the denoiser's
/// offsets, clamped to the volume.
pub fn host_neighbors(host: &PhantomSubject, z: usize, offsets: &[i32]) -> Vec<Slice<f32>> {
    offsets
        .iter()
        .map(|&o| host.slice((z as i64 + o as i64).clamp(0, host.depth as i64 - 1) as usize))
        .collect()
}

/// Consecutive VAE samples too large for the placement region that are
/// redrawn before the placement error propagates.
pub const MAX_OVERSIZE_REDRAWS: usize = 10;

/// Draw `n` positive pairs. Mask volumes and hosts are consumed in order so
/// the pool is a pure function of `seed`. A prior sample whose lesion does
/// not fit the placement region is discarded and the next one drawn.
pub fn synthesize_pairs(
    gen: &Generator<'_>,
    hosts: &[PhantomSubject],
    placement: (usize, usize, usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    let parts = Parts { denoiser: gen.denoiser, params: gen.params, schedule: gen.schedule, sampler: &gen.sampler };
    synthesize(&parts, hosts, placement, n, seed, MAX_OVERSIZE_REDRAWS, |vseed| {
        Ok(gen.vae.sample_masks(1, vseed, gen.vae_params)?.remove(0))
    })
}

/// As [`synthesize_pairs`], with mask volumes taken cyclically from `volumes`
/// instead of drawn from the VAE. Each pass re-jitters the placement. A
/// volume that does not fit the placement region is an error.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_from_masks(
    denoiser: &Denoiser,
    params: &ParamTree<f32>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    volumes: &[MaskVolume],
    hosts: &[PhantomSubject],
    placement: (usize, usize, usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if volumes.is_empty() {
        return Err(SalientError::Config("no mask volumes for synthesis".into()));
    }
    let parts = Parts { denoiser, params, schedule, sampler };
    let mut next = 0usize;
    synthesize(&parts, hosts, placement, n, seed, 0, |_| {
        let v = volumes[next % volumes.len()].clone();
        next += 1;
        Ok(v)
    })
}

struct Parts<'a> {
    denoiser: &'a Denoiser,
    params: &'a ParamTree<f32>,
    schedule: &'a NoiseSchedule,
    sampler: &'a SamplerConfig,
}

fn synthesize(
    gen: &Parts<'_>,
    hosts: &[PhantomSubject],
    placement: (usize, usize, usize, usize),
    n: usize,
    seed: u64,
    max_redraws: usize,
    mut volume: impl FnMut(u64) -> Result<MaskVolume>,
) -> Result<Vec<PairedSample>> {
    let host0 = hosts.first().ok_or_else(|| SalientError::Config("no host subjects for synthesis".into()))?;
    if hosts.iter().any(|h| h.label != 0) {
        return Err(SalientError::Config("synthesis hosts must be negative subjects".into()));
    }
    let (h, w) = (host0.height, host0.width);
    let offsets = &gen.denoiser.config.neighbor_offsets;
    let mut out = Vec::with_capacity(n);
    let mut v = 0u64;
    let mut redraws = 0;
    while out.len() < n {
        let vseed = derive_seed(seed, v);
        let vol = volume(vseed)?;
        let host = &hosts[v as usize % hosts.len()];
        let depth = vol.mask.d;
        let masks = match slice_conditioning_masks(&vol, (h, w), placement, derive_seed(vseed, 1)) {
            Err(SalientError::Placement(_)) if redraws < max_redraws => {
                redraws += 1;
                v += 1;
                continue;
            }
            r => r?,
        };
        redraws = 0;
        if masks.is_empty() {
            return Err(SalientError::Generation("mask volume has no nonempty slices".into()));
        }
        for (k, mask) in masks {
            if out.len() == n {
                break;
            }
            let z = k * host.depth / depth;
            let neighbors = host_neighbors(host, z, offsets);
            let s = sample_slice(
                gen.denoiser,
                gen.params,
                gen.schedule,
                &mask,
                &neighbors,
                gen.sampler,
                derive_seed(vseed, 2 + k as u64),
            )?;
            out.push(pair_synthetic(s, &mask)?);
        }
        v += 1;
    }
    Ok(out)
}

/// Stack pairs into one SALV volume, one axial slice per pair.
pub fn pairs_to_salv(pairs: &[PairedSample]) -> Result<SalvVolume> {
    let first = pairs.first().ok_or_else(|| SalientError::invalid("no pairs to store"))?;
    let (h, w) = (first.slice.h, first.slice.w);
    if pairs.iter().any(|p| p.slice.h != h || p.slice.w != w) {
        return Err(SalientError::dim("pairs differ in slice shape"));
    }
    let mut intensity = Vec::with_capacity(pairs.len() * h * w);
    let mut mask = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        intensity.extend_from_slice(&p.slice.data);
        mask.extend_from_slice(&p.mask.data);
    }
    Ok(SalvVolume {
        depth: pairs.len(),
        height: h,
        width: w,
        intensity: Some(intensity),
        mask: Some(Mask3 { d: pairs.len(), h, w, data: mask }),
    })
}

/// Inverse of [`pairs_to_salv`].
pub fn pairs_from_salv(v: &SalvVolume) -> Result<Vec<PairedSample>> {
    let (Some(intensity), Some(mask)) = (&v.intensity, &v.mask) else {
        return Err(SalientError::format("flags", "synthetic pool needs intensity and mask payloads"));
    };
    let n = v.height * v.width;
    (0..v.depth)
        .map(|z| {
            let s = Slice::new(v.height, v.width, intensity[z * n..(z + 1) * n].to_vec())?;
            pair_synthetic(s, &mask.slice(z))
        })
        .collect()
}
