//! im2col-based convolution over `[C, D, H, W]` volumes. 2D convolutions use
//! `D = 1` with a depth-1 kernel.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn same2d(k: usize) -> Self {
        Self { kernel: [1, k, k], stride: [1, 1, 1], pad: [0, k / 2, k / 2] }
    }

    pub fn down2d() -> Self {
        Self { kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] }
    }

    pub fn same3d(k: usize) -> Self {
        Self { kernel: [k, k, k], stride: [1, 1, 1], pad: [k / 2, k / 2, k / 2] }
    }

    pub fn down3d() -> Self {
        Self { kernel: [3, 3, 3], stride: [2, 2, 2], pad: [1, 1, 1] }
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = dims[i] + 2 * self.pad[i];
            if padded < self.kernel[i] {
                return None;
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `lo..hi` whose input index `o * stride + k - pad` lies
/// inside `0..n`.
fn valid_range(out: usize, n: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { (n + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    dims: [usize; 3],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Vec<T> {
    let [d, h, w] = dims;
    let [kd, kh, kw] = spec.kernel;
    let p = out[0] * out[1] * out[2];
    let mut cols = vec![T::zero(); cin * kd * kh * kw * p];
    let mut row = 0;
    for ci in 0..cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for od in 0..out[0] {
                        let id = (od * spec.stride[0] + a) as isize - spec.pad[0] as isize;
                        for oh in 0..out[1] {
                            let ih = (oh * spec.stride[1] + b) as isize - spec.pad[1] as isize;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                idx += out[2];
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            let (lo, hi) = valid_range(out[2], w, spec.stride[2], spec.pad[2], c);
                            let s = spec.stride[2];
                            if lo < hi {
                                let first = base + lo * s + c - spec.pad[2];
                                if s == 1 {
                                    dst[idx + lo..idx + hi].copy_from_slice(&xc[first..first + hi - lo]);
                                } else {
                                    for (j, ow) in (lo..hi).enumerate() {
                                        dst[idx + ow] = xc[first + j * s];
                                    }
                                }
                            }
                            idx += out[2];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    dims: [usize; 3],
    spec: &ConvSpec,
    out: [usize; 3],
    dx: &mut [T],
) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = spec.kernel;
    let p = out[0] * out[1] * out[2];
    let mut row = 0;
    for ci in 0..cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for od in 0..out[0] {
                        let id = (od * spec.stride[0] + a) as isize - spec.pad[0] as isize;
                        for oh in 0..out[1] {
                            let ih = (oh * spec.stride[1] + b) as isize - spec.pad[1] as isize;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                idx += out[2];
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            let (lo, hi) = valid_range(out[2], w, spec.stride[2], spec.pad[2], c);
                            let s = spec.stride[2];
                            if lo < hi {
                                let first = base + lo * s + c - spec.pad[2];
                                if s == 1 {
                                    let d = &mut xc[first..first + hi - lo];
                                    d.iter_mut().zip(&src[idx + lo..idx + hi]).for_each(|(a, &b)| *a += b);
                                } else {
                                    for (j, ow) in (lo..hi).enumerate() {
                                        xc[first + j * s] += src[idx + ow];
                                    }
                                }
                            }
                            idx += out[2];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Reference convolution used by tests.
#[cfg(test)]
pub(crate) fn conv_naive(
    x: &[f64],
    cin: usize,
    dims: [usize; 3],
    wgt: &[f64],
    cout: usize,
    spec: &ConvSpec,
) -> (Vec<f64>, [usize; 3]) {
    let out = spec.out_dims(dims).unwrap();
    let [kd, kh, kw] = spec.kernel;
    let mut y = vec![0.0; cout * out[0] * out[1] * out[2]];
    for co in 0..cout {
        for od in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for a in 0..kd {
                            for b in 0..kh {
                                for c in 0..kw {
                                    let id = (od * spec.stride[0] + a) as isize - spec.pad[0] as isize;
                                    let ih = (oh * spec.stride[1] + b) as isize - spec.pad[1] as isize;
                                    let iw = (ow * spec.stride[2] + c) as isize - spec.pad[2] as isize;
                                    if id < 0
                                        || ih < 0
                                        || iw < 0
                                        || id >= dims[0] as isize
                                        || ih >= dims[1] as isize
                                        || iw >= dims[2] as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((ci * dims[0] + id as usize) * dims[1] + ih as usize) * dims[2]
                                        + iw as usize;
                                    let wi = (((co * cin + ci) * kd + a) * kh + b) * kw + c;
                                    s += x[xi] * wgt[wi];
                                }
                            }
                        }
                    }
                    y[((co * out[0] + od) * out[1] + oh) * out[2] + ow] = s;
                }
            }
        }
    }
    (y, out)
}
