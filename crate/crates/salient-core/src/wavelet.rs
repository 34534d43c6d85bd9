//! Single-level orthonormal 2D Haar transform.
//!
//! Block convention, for each disjoint 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2      LH = ((a + b) - (c + d)) / 2
//! HL = ((a - b) + (c - d)) / 2  HH = ((a - b) - (c - d)) / 2
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::scalar::Scalar;

pub const LL: usize = 0;
pub const LH: usize = 1;
pub const HL: usize = 2;
pub const HH: usize = 3;
pub const BAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];

/// Stabiliser inside `ln(std + eps)`.
pub const LOG_STD_EPS: f64 = 1e-6;

/// An `h x w` image, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Slice<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SalientError::dim(format!("slice {}x{} needs {} values, got {}", h, w, h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![T::zero(); h * w] }
    }

    pub fn constant(h: usize, w: usize, v: T) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|&v| v.max(lo).min(hi)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Slice<U> {
        Slice { h: self.h, w: self.w, data: self.data.iter().map(|v| U::c(v.f64())).collect() }
    }
}

/// Four half-resolution bands `[LL, LH, HL, HH]`, stored band-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveletCoeffs<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> WaveletCoeffs<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 4 * h * w {
            return Err(SalientError::dim(format!(
                "wavelet stack 4x{}x{} needs {} values, got {}",
                h,
                w,
                4 * h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![T::zero(); 4 * h * w] }
    }

    pub fn band(&self, b: usize) -> &[T] {
        let n = self.h * self.w;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.h * self.w;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w && self.data.len() == other.data.len()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert!(self.same_shape(other));
        Self { h: self.h, w: self.w, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Raw analysis on an `hh x ww` image (both even). Output is band-major.
pub(crate) fn haar_analysis<T: Scalar>(x: &[T], hh: usize, ww: usize) -> Vec<T> {
    let (h, w) = (hh / 2, ww / 2);
    let n = h * w;
    let half = T::c(0.5);
    let mut out = vec![T::zero(); 4 * n];
    for i in 0..h {
        for j in 0..w {
            let a = x[(2 * i) * ww + 2 * j];
            let b = x[(2 * i) * ww + 2 * j + 1];
            let c = x[(2 * i + 1) * ww + 2 * j];
            let d = x[(2 * i + 1) * ww + 2 * j + 1];
            let k = i * w + j;
            out[k] = (a + b + c + d) * half;
            out[n + k] = ((a + b) - (c + d)) * half;
            out[2 * n + k] = ((a - b) + (c - d)) * half;
            out[3 * n + k] = ((a - b) - (c - d)) * half;
        }
    }
    out
}

/// Raw synthesis from a band-major `[4, h, w]` stack to a `2h x 2w` image.
pub(crate) fn haar_synthesis<T: Scalar>(bands: &[T], h: usize, w: usize) -> Vec<T> {
    let n = h * w;
    let ww = 2 * w;
    let half = T::c(0.5);
    let mut out = vec![T::zero(); 4 * n];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let (ll, lh, hl, hh) = (bands[k], bands[n + k], bands[2 * n + k], bands[3 * n + k]);
            out[(2 * i) * ww + 2 * j] = (ll + lh + hl + hh) * half;
            out[(2 * i) * ww + 2 * j + 1] = (ll + lh - hl - hh) * half;
            out[(2 * i + 1) * ww + 2 * j] = (ll - lh + hl - hh) * half;
            out[(2 * i + 1) * ww + 2 * j + 1] = (ll - lh - hl + hh) * half;
        }
    }
    out
}

pub fn dwt2<T: Scalar>(slice: &Slice<T>) -> Result<WaveletCoeffs<T>> {
    if slice.h == 0 || slice.w == 0 || slice.h % 2 != 0 || slice.w % 2 != 0 {
        return Err(SalientError::dim(format!("dwt2 needs even positive dimensions, got {}x{}", slice.h, slice.w)));
    }
    if slice.data.len() != slice.h * slice.w {
        return Err(SalientError::dim("slice data length does not match its dimensions"));
    }
    if slice.data.iter().any(|v| !v.is_finite()) {
        return Err(SalientError::invalid("dwt2 input contains non-finite values"));
    }
    Ok(WaveletCoeffs { h: slice.h / 2, w: slice.w / 2, data: haar_analysis(&slice.data, slice.h, slice.w) })
}

pub fn idwt2<T: Scalar>(coeffs: &WaveletCoeffs<T>) -> Result<Slice<T>> {
    if coeffs.data.len() != 4 * coeffs.h * coeffs.w {
        return Err(SalientError::dim(format!(
            "band shape mismatch: {} values for 4x{}x{}",
            coeffs.data.len(),
            coeffs.h,
            coeffs.w
        )));
    }
    Ok(Slice { h: 2 * coeffs.h, w: 2 * coeffs.w, data: haar_synthesis(&coeffs.data, coeffs.h, coeffs.w) })
}

/// Per-band mean, population std and `ln(std + eps)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub log_std: [f64; 4],
}

pub fn mean_std<T: Scalar>(v: &[T]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|x| x.f64()).sum::<f64>() / n;
    let var = v.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn band_stats<T: Scalar>(coeffs: &WaveletCoeffs<T>) -> Result<BandStats> {
    if coeffs.h * coeffs.w == 0 {
        return Err(SalientError::invalid("band_stats needs nonempty bands"));
    }
    let mut s = BandStats { mean: [0.0; 4], std: [0.0; 4], log_std: [0.0; 4] };
    for b in 0..4 {
        let (m, sd) = mean_std(coeffs.band(b));
        s.mean[b] = m;
        s.std[b] = sd;
        s.log_std[b] = (sd + LOG_STD_EPS).ln();
    }
    Ok(s)
}

/// Per-band reconstruction weights, boosted on a dilated morphological
/// gradient of the downsampled lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    pub h: usize,
    pub w: usize,
    pub weights: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightMapParams {
    pub base: [f64; 4],
    pub beta: f64,
    pub dilation: usize,
}

impl Default for WeightMapParams {
    fn default() -> Self {
        Self { base: [1.0, 1.0, 1.0, 0.7], beta: 2.0, dilation: 2 }
    }
}

pub fn boundary_weight_map<T: Scalar>(mask_ds: &Mask, params: &WeightMapParams) -> Result<WeightMap<T>> {
    if params.base.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
        return Err(SalientError::invalid("band base weights must be finite and nonnegative"));
    }
    if !(params.beta >= 0.0) || !params.beta.is_finite() {
        return Err(SalientError::invalid("boundary beta must be finite and nonnegative"));
    }
    let boundary = mask_ds.gradient().dilate_n(params.dilation);
    let n = mask_ds.h * mask_ds.w;
    let mut weights = Vec::with_capacity(4 * n);
    for b in 0..4 {
        for &v in &boundary.data {
            weights.push(T::c(params.base[b] * (1.0 + params.beta * v as f64)));
        }
    }
    Ok(WeightMap { h: mask_ds.h, w: mask_ds.w, weights })
}
