use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::condition::build_condition;
use super::config::GuidanceScales;
use super::unet::Denoiser;
use crate::diffusion::{reverse_step_to, NoiseSchedule, X0_CLAMP};
use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::wavelet::{idwt2, Slice, WaveletCoeffs};

/// `null + s_mask (masked - null) + s_nei (full - masked)`.
///
/// The first interpolation is evaluated from whichever end is nearer so
/// that `s_mask = 0` and `s_mask = 1` reproduce the branch outputs exactly.
pub fn guidance_combine<T: Scalar>(
    null: &WaveletCoeffs<T>,
    masked: &WaveletCoeffs<T>,
    full: &WaveletCoeffs<T>,
    s_mask: f64,
    s_nei: f64,
) -> Result<WaveletCoeffs<T>> {
    if !null.same_shape(masked) || !null.same_shape(full) {
        return Err(SalientError::dim("guidance branches differ in shape"));
    }
    let (sm, sn) = (T::c(s_mask), T::c(s_nei));
    let near_null = s_mask < 0.5;
    let rest = T::one() - sm;
    let data = null
        .data
        .iter()
        .zip(&masked.data)
        .zip(&full.data)
        .map(|((&a, &b), &c)| {
            let base = if near_null { a + sm * (b - a) } else { b - rest * (b - a) };
            base + sn * (c - b)
        })
        .collect();
    Ok(WaveletCoeffs { h: null.h, w: null.w, data })
}

/// Three-pass structured guidance at timestep `t` of a `steps`-step schedule.
#[allow(clippy::too_many_arguments)]
pub fn guided_denoise<T: Scalar>(
    den: &Denoiser,
    params: &ParamTree<T>,
    w_t: &WaveletCoeffs<T>,
    t: usize,
    steps: usize,
    mask: &Mask,
    neighbors: &[Slice<T>],
    scales: &GuidanceScales,
) -> Result<WaveletCoeffs<T>> {
    scales.validate()?;
    let detail = den.config.neighbor_detail_bands;
    let c_null = build_condition(mask, neighbors, true, true, detail)?;
    let c_mask = build_condition(mask, neighbors, true, false, detail)?;
    let c_full = build_condition(mask, neighbors, false, false, detail)?;
    let p_null = den.denoise(w_t, t, &c_null, params)?;
    let p_mask = den.denoise(w_t, t, &c_mask, params)?;
    let p_full = den.denoise(w_t, t, &c_full, params)?;
    guidance_combine(&p_null, &p_mask, &p_full, scales.s_mask, scales.s_nei(t, steps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub scales: GuidanceScales,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0, scales: GuidanceScales::default() }
    }
}

fn normal_coeffs<T: Scalar, R: Rng>(rng: &mut R, h: usize, w: usize) -> WaveletCoeffs<T> {
    let data = (0..4 * h * w).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect();
    WaveletCoeffs { h, w, data }
}

/// Generate one slice under `mask` from unit-normal wavelet noise.
pub fn sample_slice<T: Scalar>(
    den: &Denoiser,
    params: &ParamTree<T>,
    sched: &NoiseSchedule,
    mask: &Mask,
    neighbors: &[Slice<T>],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Slice<T>> {
    if let Some(name) = params.first_non_finite() {
        return Err(SalientError::Sampling(format!("parameter `{}` is not finite", name)));
    }
    den.config.check_slice(mask.h, mask.w)?;
    let ts = sched.strided(cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (mask.h / 2, mask.w / 2);
    let mut w_t = normal_coeffs::<T, _>(&mut rng, h, w);
    let mut last = w_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let w0_hat = guided_denoise(den, params, &w_t, t, sched.steps, mask, neighbors, &cfg.scales)?;
        let noise = normal_coeffs::<T, _>(&mut rng, h, w);
        w_t = reverse_step_to(&w_t, &w0_hat, t, t_prev, sched, cfg.eta, &noise)?;
        last = w0_hat;
    }
    let lim = T::c(X0_CLAMP);
    let last = last.map(|v| v.max(-lim).min(lim));
    if !last.is_finite() {
        return Err(SalientError::Sampling("sampler produced non-finite coefficients".into()));
    }
    Ok(idwt2(&last)?.clamp(-T::one(), T::one()))
}
