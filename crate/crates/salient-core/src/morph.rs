//! Binary masks and 3x3(x3) morphology with zero padding outside the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};

/// Binary `h x w` grid stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![1; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SalientError::dim(format!("mask {}x{} needs {} entries, got {}", h, w, h * w, data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(SalientError::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { h, w, data })
    }

    /// Threshold a real grid at `> 0.5`.
    pub fn from_probs<T: crate::Scalar>(h: usize, w: usize, p: &[T]) -> Self {
        Self { h, w, data: p.iter().map(|&v| u8::from(v > T::c(0.5))).collect() }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn dilate(&self) -> Self {
        self.morph(true)
    }

    pub fn erode(&self) -> Self {
        self.morph(false)
    }

    pub fn dilate_n(&self, n: usize) -> Self {
        (0..n).fold(self.clone(), |m, _| m.dilate())
    }

    /// `dilate - erode` with a 3x3 structuring element.
    pub fn gradient(&self) -> Self {
        let d = self.dilate();
        let e = self.erode();
        Self { h: self.h, w: self.w, data: d.data.iter().zip(&e.data).map(|(&a, &b)| a & !b & 1).collect() }
    }

    fn morph(&self, dilate: bool) -> Self {
        let (h, w) = (self.h as isize, self.w as isize);
        let mut out = Self::zeros(self.h, self.w);
        for y in 0..h {
            for x in 0..w {
                let mut any = false;
                let mut all = true;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        let v = yy >= 0 && yy < h && xx >= 0 && xx < w && self.data[(yy * w + xx) as usize] != 0;
                        any |= v;
                        all &= v;
                    }
                }
                out.data[(y * w + x) as usize] = u8::from(if dilate { any } else { all });
            }
        }
        out
    }

    /// 2x2 max-pool (any positive pixel in the block).
    pub fn downsample2(&self) -> Result<Self> {
        self.max_pool(2)
    }

    pub fn max_pool(&self, f: usize) -> Result<Self> {
        if self.h % f != 0 || self.w % f != 0 {
            return Err(SalientError::dim(format!("mask {}x{} not divisible by {}", self.h, self.w, f)));
        }
        let (oh, ow) = (self.h / f, self.w / f);
        let mut out = Self::zeros(oh, ow);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    out.set(y / f, x / f, true);
                }
            }
        }
        Ok(out)
    }

    pub fn to_real<T: crate::Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect()
    }

    pub fn dice(&self, other: &Mask) -> f64 {
        let inter: usize = self.data.iter().zip(&other.data).filter(|(&a, &b)| a != 0 && b != 0).count();
        let total = self.count() + other.count();
        if total == 0 {
            1.0
        } else {
            2.0 * inter as f64 / total as f64
        }
    }
}

/// Binary `d x h x w` volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask3 {
    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w, data: vec![0; d * h * w] }
    }

    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.idx(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.idx(z, y, x);
        self.data[i] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn slice(&self, z: usize) -> Mask {
        let n = self.h * self.w;
        Mask { h: self.h, w: self.w, data: self.data[z * n..(z + 1) * n].to_vec() }
    }

    /// 3x3x3 morphological gradient, zero padding.
    pub fn gradient(&self) -> Self {
        let (d, h, w) = (self.d as isize, self.h as isize, self.w as isize);
        let mut out = Self::zeros(self.d, self.h, self.w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut any = false;
                    let mut all = true;
                    for dz in -1..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                                let v = zz >= 0
                                    && zz < d
                                    && yy >= 0
                                    && yy < h
                                    && xx >= 0
                                    && xx < w
                                    && self.data[((zz * h + yy) * w + xx) as usize] != 0;
                                any |= v;
                                all &= v;
                            }
                        }
                    }
                    out.data[((z * h + y) * w + x) as usize] = u8::from(any && !all);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_gradient_is_its_3x3_support() {
        let mut m = Mask::zeros(7, 7);
        m.set(3, 3, true);
        let g = m.gradient();
        assert_eq!(g.count(), 9);
        for y in 2..=4 {
            for x in 2..=4 {
                assert!(g.get(y, x));
            }
        }
    }

    #[test]
    fn full_mask_gradient_is_the_border_ring_only() {
        let m = Mask::ones(6, 6);
        let g = m.gradient();
        for y in 0..6 {
            for x in 0..6 {
                let border = y == 0 || x == 0 || y == 5 || x == 5;
                assert_eq!(g.get(y, x), border);
            }
        }
    }

    #[test]
    fn max_pool_keeps_any_positive() {
        let mut m = Mask::zeros(4, 4);
        m.set(1, 0, true);
        let d = m.downsample2().unwrap();
        assert!(d.get(0, 0));
        assert_eq!(d.count(), 1);
    }
}
