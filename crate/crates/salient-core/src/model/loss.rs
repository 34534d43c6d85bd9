use super::condition::CondStack;
use super::config::LossWeights;
use super::unet::Denoiser;
use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::nn::{ConvSpec, Graph, Var};
use crate::params::{ParamTree, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{band_stats, boundary_weight_map, idwt2, Slice, WaveletCoeffs, WeightMap, LL, LOG_STD_EPS};

/// Dilation (in pixels, 3x3 steps) of the lesion mask defining the
/// auxiliary-loss region.
pub const AUX_DILATION: usize = 4;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// One supervised example: noisy input, its timestep and conditioning, the
/// clean target and the full-resolution lesion mask.
#[derive(Clone, Debug)]
pub struct TrainingSample<T> {
    pub w_t: WaveletCoeffs<T>,
    pub t: usize,
    pub cond: CondStack<T>,
    pub w0: WaveletCoeffs<T>,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub wavelet: f64,
    pub ll: f64,
    pub hf: f64,
    pub aux: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.wavelet + self.ll + self.hf + self.aux
    }
}

/// Mean of `W * |w0_hat - w0|` over every coefficient.
pub fn loss_wavelet<T: Scalar>(w0_hat: &WaveletCoeffs<T>, w0: &WaveletCoeffs<T>, wm: &WeightMap<T>) -> Result<f64> {
    if !w0_hat.same_shape(w0) || wm.h != w0.h || wm.w != w0.w || wm.weights.len() != w0.data.len() {
        return Err(SalientError::dim("loss_wavelet operands differ in shape"));
    }
    if wm.weights.iter().any(|&v| v < T::zero()) {
        return Err(SalientError::invalid("negative reconstruction weight"));
    }
    let s: f64 = w0_hat
        .data
        .iter()
        .zip(&w0.data)
        .zip(&wm.weights)
        .map(|((&a, &b), &k)| k.f64() * (a.f64() - b.f64()).abs())
        .sum();
    Ok(s / w0.data.len() as f64)
}

pub fn loss_ll_moments<T: Scalar>(
    w0_hat: &WaveletCoeffs<T>,
    w0: &WaveletCoeffs<T>,
    lambda_mu: f64,
    lambda_sigma: f64,
) -> Result<f64> {
    if !w0_hat.same_shape(w0) {
        return Err(SalientError::dim("loss_ll_moments operands differ in shape"));
    }
    let (p, q) = (band_stats(w0_hat)?, band_stats(w0)?);
    Ok(lambda_mu * (p.mean[LL] - q.mean[LL]).powi(2) + lambda_sigma * (p.log_std[LL] - q.log_std[LL]).powi(2))
}

/// `lambdas` are ordered LH, HL, HH.
pub fn loss_hf_variance<T: Scalar>(w0_hat: &WaveletCoeffs<T>, w0: &WaveletCoeffs<T>, lambdas: [f64; 3]) -> Result<f64> {
    if !w0_hat.same_shape(w0) {
        return Err(SalientError::dim("loss_hf_variance operands differ in shape"));
    }
    let (p, q) = (band_stats(w0_hat)?, band_stats(w0)?);
    Ok((0..3).map(|i| lambdas[i] * (p.log_std[i + 1] - q.log_std[i + 1]).powi(2)).sum())
}

fn sobel(d: &[f64], h: usize, w: usize, k: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += k[dy * 3 + dx] * d[yy as usize * w + xx as usize];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Sobel edge mismatch plus saturation hinge, both averaged over the mask
/// dilated by [`AUX_DILATION`] pixels. Zero when that region is empty.
pub fn loss_aux<T: Scalar>(x_hat: &Slice<T>, x: &Slice<T>, mask: &Mask, lambda_edge: f64, lambda_sat: f64) -> Result<f64> {
    if x_hat.h != x.h || x_hat.w != x.w || mask.h != x.h || mask.w != x.w {
        return Err(SalientError::dim("loss_aux operands differ in shape"));
    }
    let region = mask.dilate_n(AUX_DILATION);
    let area = region.count();
    if area == 0 {
        return Ok(0.0);
    }
    let d: Vec<f64> = x_hat.data.iter().zip(&x.data).map(|(a, b)| a.f64() - b.f64()).collect();
    let gx = sobel(&d, x.h, x.w, &SOBEL_X);
    let gy = sobel(&d, x.h, x.w, &SOBEL_Y);
    let mut edge = 0.0;
    let mut sat = 0.0;
    for i in 0..d.len() {
        if region.data[i] != 0 {
            edge += gx[i].abs() + gy[i].abs();
            let over = (x_hat.data[i].f64().abs() - 1.0).max(0.0);
            sat += over * over;
        }
    }
    Ok((lambda_edge * edge + lambda_sat * sat) / area as f64)
}

/// All four terms for one prediction against its target.
pub fn sample_loss<T: Scalar>(
    w0_hat: &WaveletCoeffs<T>,
    w0: &WaveletCoeffs<T>,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let wm = boundary_weight_map::<T>(&mask.downsample2()?, &weights.weight_map)?;
    let x_hat = idwt2(w0_hat)?;
    let x = idwt2(w0)?;
    Ok(LossTerms {
        wavelet: loss_wavelet(w0_hat, w0, &wm)?,
        ll: loss_ll_moments(w0_hat, w0, weights.lambda_mu, weights.lambda_sigma)?,
        hf: loss_hf_variance(w0_hat, w0, weights.hf())?,
        aux: loss_aux(&x_hat, &x, mask, weights.lambda_edge, weights.lambda_sat)?,
    })
}

/// Batch mean of the four-term objective, evaluated through the network.
pub fn total_loss<T: Scalar>(
    den: &Denoiser,
    batch: &[TrainingSample<T>],
    params: &ParamTree<T>,
    weights: &LossWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(SalientError::invalid("empty batch"));
    }
    let mut acc = 0.0;
    for s in batch {
        let pred = den.denoise(&s.w_t, s.t, &s.cond, params)?;
        acc += sample_loss(&pred, &s.w0, &s.mask, weights)?.total();
    }
    Ok(acc / batch.len() as f64)
}

fn band_log_std<T: Scalar>(g: &mut Graph<T>, pred: Var, b: usize) -> (Var, Var) {
    let s = g.shape(pred).to_vec();
    let band = g.narrow(pred, b, 1);
    let mu = g.mean(band);
    let mu_full = g.expand(mu, &[1, s[1], s[2]]);
    let centred = g.sub(band, mu_full);
    let sq = g.square(centred);
    let var = g.mean(sq);
    let sd = g.sqrt(var);
    let sd = g.add_scalar(sd, T::c(LOG_STD_EPS));
    (mu, g.ln(sd))
}

fn weighted_square<T: Scalar>(g: &mut Graph<T>, v: Var, target: f64, lambda: f64) -> Var {
    let d = g.add_scalar(v, T::c(-target));
    let d = g.square(d);
    g.scale(d, T::c(lambda))
}

/// The same objective recorded on a graph for a `[4, h, w]` prediction.
pub fn sample_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    sample: &TrainingSample<T>,
    weights: &LossWeights,
) -> Result<Var> {
    let (h, w) = (sample.w0.h, sample.w0.w);
    let wm = boundary_weight_map::<T>(&sample.mask.downsample2()?, &weights.weight_map)?;
    let target = g.constant(Tensor::from_vec(&[4, h, w], sample.w0.data.clone())?);
    let wc = g.constant(Tensor::from_vec(&[4, h, w], wm.weights)?);
    let d = g.sub(pred, target);
    let d = g.abs(d);
    let d = g.mul(d, wc);
    let mut total = g.mean(d);

    let tgt = band_stats(&sample.w0)?;
    if weights.lambda_mu != 0.0 || weights.lambda_sigma != 0.0 {
        let (mu, ls) = band_log_std(g, pred, LL);
        let a = weighted_square(g, mu, tgt.mean[LL], weights.lambda_mu);
        let b = weighted_square(g, ls, tgt.log_std[LL], weights.lambda_sigma);
        total = g.add(total, a);
        total = g.add(total, b);
    }
    for (i, &lam) in weights.hf().iter().enumerate() {
        if lam != 0.0 {
            let (_, ls) = band_log_std(g, pred, i + 1);
            let term = weighted_square(g, ls, tgt.log_std[i + 1], lam);
            total = g.add(total, term);
        }
    }

    let region = sample.mask.dilate_n(AUX_DILATION);
    let area = region.count();
    if area > 0 && (weights.lambda_edge != 0.0 || weights.lambda_sat != 0.0) {
        let (hh, ww) = (2 * h, 2 * w);
        let x_hat = g.idwt2(pred);
        let r: Vec<T> = region.to_real();
        let inv_area = T::c(1.0 / area as f64);
        if weights.lambda_edge != 0.0 {
            let x = idwt2(&sample.w0)?;
            let xc = g.constant(Tensor::from_vec(&[hh, ww], x.data)?);
            let dd = g.sub(x_hat, xc);
            let dd = g.reshape(dd, &[1, hh, ww]);
            let k: Vec<T> = SOBEL_X.iter().chain(SOBEL_Y.iter()).map(|&v| T::c(v)).collect();
            let kv = g.constant(Tensor::from_vec(&[2, 1, 3, 3], k)?);
            let grad = g.conv(dd, kv, None, ConvSpec::same2d(3));
            let grad = g.abs(grad);
            let r2 = g.constant(Tensor::from_vec(&[2, hh, ww], r.repeat(2))?);
            let e = g.mul(grad, r2);
            let e = g.sum(e);
            let e = g.scale(e, inv_area * T::c(weights.lambda_edge));
            total = g.add(total, e);
        }
        if weights.lambda_sat != 0.0 {
            let rc = g.constant(Tensor::from_vec(&[hh, ww], r)?);
            let a = g.abs(x_hat);
            let a = g.add_scalar(a, -T::one());
            let a = g.relu(a);
            let a = g.square(a);
            let a = g.mul(a, rc);
            let a = g.sum(a);
            let a = g.scale(a, inv_area * T::c(weights.lambda_sat));
            total = g.add(total, a);
        }
    }
    Ok(total)
}

/// Batch-mean objective and its gradient. Each sample is recorded on its own
/// graph; gradients are summed in batch order.
pub fn loss_and_grads<T: Scalar>(
    den: &Denoiser,
    batch: &[TrainingSample<T>],
    params: &ParamTree<T>,
    weights: &LossWeights,
) -> Result<(f64, ParamTree<T>)> {
    if batch.is_empty() {
        return Err(SalientError::invalid("empty batch"));
    }
    weights.validate()?;
    let scale = T::c(1.0 / batch.len() as f64);
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, params, true);
        let pred = den.forward(&mut g, &pv, &s.w_t, s.t, &s.cond)?;
        let l = sample_loss_graph(&mut g, pred, s, weights)?;
        loss += g.value(l).item().f64();
        let gr = g.backward(l);
        grads.axpy(scale, &pv.grads(params, &gr));
    }
    Ok((loss / batch.len() as f64, grads))
}
