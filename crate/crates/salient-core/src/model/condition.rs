use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{dwt2, Slice, WaveletCoeffs, HL, LH, LL};

/// Conditioning channels on the wavelet grid: the downsampled mask followed
/// by the LL band (and optionally LH/HL) of each neighbour slice.
#[derive(Clone, Debug, PartialEq)]
pub struct CondStack<T> {
    pub h: usize,
    pub w: usize,
    pub channels: Tensor<T>,
    pub dropped_neighbors: bool,
    pub dropped_all: bool,
}

impl<T: Scalar> CondStack<T> {
    pub fn num_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.h * self.w;
        &self.channels.data()[c * n..(c + 1) * n]
    }

    /// The mask channel as a binary grid (empty when dropped).
    pub fn mask_ds(&self) -> Mask {
        Mask::from_probs(self.h, self.w, self.channel(0))
    }
}

/// Build the stack for one slice. `neighbors` holds one slice per configured
/// offset; callers substitute the centre slice at volume borders.
pub fn build_condition<T: Scalar>(
    mask: &Mask,
    neighbors: &[Slice<T>],
    drop_neighbors: bool,
    drop_all: bool,
    detail_bands: bool,
) -> Result<CondStack<T>> {
    if mask.data.len() != mask.h * mask.w || mask.data.iter().any(|&v| v > 1) {
        return Err(SalientError::invalid("conditioning mask must be binary"));
    }
    let mask_ds = mask.downsample2()?;
    let (h, w) = (mask_ds.h, mask_ds.w);
    let n = h * w;
    let per = if detail_bands { 3 } else { 1 };
    let c = 1 + per * neighbors.len();
    let mut data = vec![T::zero(); c * n];
    if !drop_all {
        data[..n].copy_from_slice(&mask_ds.to_real::<T>());
        if !drop_neighbors {
            for (i, nb) in neighbors.iter().enumerate() {
                if nb.h != mask.h || nb.w != mask.w {
                    return Err(SalientError::dim(format!(
                        "neighbour {}x{} does not match mask {}x{}",
                        nb.h, nb.w, mask.h, mask.w
                    )));
                }
                let coeffs = dwt2(nb)?;
                let bands: &[usize] = if detail_bands { &[LL, LH, HL] } else { &[LL] };
                for (j, &b) in bands.iter().enumerate() {
                    let off = (1 + i * per + j) * n;
                    data[off..off + n].copy_from_slice(coeffs.band(b));
                }
            }
        }
    }
    Ok(CondStack {
        h,
        w,
        channels: Tensor::from_vec(&[c, h, w], data)?,
        dropped_neighbors: drop_neighbors || drop_all,
        dropped_all: drop_all,
    })
}

/// `w[b] * (1 + mask * tanh(gamma[b]))`.
pub fn fsa_modulate<T: Scalar>(w_t: &WaveletCoeffs<T>, mask_ds: &Mask, gains: &[T; 4]) -> Result<WaveletCoeffs<T>> {
    if mask_ds.h != w_t.h || mask_ds.w != w_t.w {
        return Err(SalientError::dim(format!(
            "mask {}x{} does not match wavelet grid {}x{}",
            mask_ds.h, mask_ds.w, w_t.h, w_t.w
        )));
    }
    let mut out = w_t.clone();
    for (b, g) in gains.iter().enumerate() {
        let th = g.tanh();
        for (v, &m) in out.band_mut(b).iter_mut().zip(&mask_ds.data) {
            if m != 0 {
                *v *= T::one() + th;
            }
        }
    }
    Ok(out)
}
