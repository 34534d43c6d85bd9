use crate::error::{Result, SalientError};
use crate::wavelet::Slice;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode Gaussian filter.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..WINDOW).map(|k| g[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..WINDOW).map(|k| g[k] * tmp[(y0 + k) * ow + x0]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> (f64, f64) {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let (ma, ..) = filter(a, h, w, g);
    let (mb, ..) = filter(b, h, w, g);
    let (saa, ..) = filter(&aa, h, w, g);
    let (sbb, ..) = filter(&bb, h, w, g);
    let (sab, ..) = filter(&ab, h, w, g);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ma.len() {
        let mu = ma[i] * mb[i];
        let va = saa[i] - ma[i] * ma[i];
        let vb = sbb[i] - mb[i] * mb[i];
        let cov = sab[i] - mu;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * mu + c1) / (ma[i] * ma[i] + mb[i] * mb[i] + c1);
    }
    let n = ma.len() as f64;
    (ssim / n, cs / n)
}

fn pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            let i = 2 * y * w + 2 * xx;
            out[y * ow + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Largest scale count that `min(h, w)` supports.
pub fn max_scales(h: usize, w: usize) -> usize {
    let m = h.min(w);
    (1..=SCALE_WEIGHTS.len()).take_while(|&s| m >= WINDOW << (s - 1)).last().unwrap_or(0)
}

/// Multi-scale SSIM of images in `[-1, 1]`, mapped to `[0, 1]` first. Negative
/// contrast-structure terms are clipped to zero before the weighted product.
pub fn ms_ssim(a: &Slice<f32>, b: &Slice<f32>, scales: usize) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(SalientError::invalid(format!("ms_ssim shapes {}x{} and {}x{} differ", a.h, a.w, b.h, b.w)));
    }
    let feasible = max_scales(a.h, a.w);
    if scales == 0 || scales > feasible {
        return Err(SalientError::invalid(format!(
            "{} scales requested for a {}x{} image; at most {} are feasible",
            scales, a.h, a.w, feasible
        )));
    }
    let wsum: f64 = SCALE_WEIGHTS[..scales].iter().sum();
    let g = gaussian_window();
    let shift = |s: &Slice<f32>| s.data.iter().map(|&v| (v as f64 + 1.0) * 0.5).collect::<Vec<f64>>();
    let (mut x, mut y, mut h, mut w) = (shift(a), shift(b), a.h, a.w);
    let mut out = 1.0;
    for s in 0..scales {
        let (ssim, cs) = ssim_cs(&x, &y, h, w, &g);
        let wt = SCALE_WEIGHTS[s] / wsum;
        let term = if s + 1 == scales { ssim } else { cs };
        out *= term.max(0.0).powf(wt);
        if s + 1 < scales {
            let (px, ph, pw) = pool2(&x, h, w);
            x = px;
            y = pool2(&y, h, w).0;
            h = ph;
            w = pw;
        }
    }
    Ok(out)
}
