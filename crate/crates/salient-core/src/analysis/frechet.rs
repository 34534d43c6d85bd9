use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SalientError};
use crate::wavelet::{band_stats, dwt2, Slice};

pub const FEATURE_DIM: usize = 80;
pub const COV_RIDGE: f64 = 1e-6;
pub const NEG_EIG_TOL: f64 = 1e-6;
const GRID: usize = 8;

/// Per-band mean and log-std over two Haar levels (16 values), then the
/// level-2 LL band average-pooled to an 8x8 grid (64 values).
pub fn feature_vector(s: &Slice<f32>) -> Result<Vec<f64>> {
    let s = s.cast::<f64>();
    let w1 = dwt2(&s)?;
    let ll1 = Slice::new(w1.h, w1.w, w1.band(0).to_vec())?;
    let w2 = dwt2(&ll1)?;
    if w2.h % GRID != 0 || w2.w % GRID != 0 {
        return Err(SalientError::dim(format!("{}x{} slice does not pool to an 8x8 grid", s.h, s.w)));
    }
    let mut f = Vec::with_capacity(FEATURE_DIM);
    for c in [&w1, &w2] {
        let st = band_stats(c)?;
        for b in 0..4 {
            f.push(st.mean[b]);
            f.push(st.log_std[b]);
        }
    }
    let (fy, fx) = (w2.h / GRID, w2.w / GRID);
    let ll = w2.band(0);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut acc = 0.0;
            for y in 0..fy {
                for x in 0..fx {
                    acc += ll[(gy * fy + y) * w2.w + gx * fx + x];
                }
            }
            f.push(acc / (fy * fx) as f64);
        }
    }
    Ok(f)
}

fn moments(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut c = x.clone();
    for j in 0..d {
        let m = mu[j];
        c.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let cov = (c.transpose() * &c) / (n as f64 - 1.0) + DMatrix::identity(d, d) * COV_RIDGE;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -NEG_EIG_TOL {
            return Err(SalientError::Numerical(format!("covariance eigenvalue {} below tolerance", v)));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// Squared Frechet distance between Gaussians fitted to two feature sets.
/// `Tr((S_a S_b)^(1/2))` is taken as the trace of the square root of the
/// symmetric product `S_a^(1/2) S_b S_a^(1/2)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map(|r| r.len()).unwrap_or(0);
    if d == 0 || a.len() <= d || b.len() <= d {
        return Err(SalientError::invalid(format!(
            "Frechet distance over {} features needs more than {} samples per set, got {} and {}",
            d,
            d,
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(SalientError::invalid("feature rows must be finite and of equal length"));
    }
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    let ra = sym_sqrt(&sa)?;
    let m = &ra * &sb * &ra;
    let e = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let mut tr_sqrt = 0.0;
    for &v in e.eigenvalues.iter() {
        if v < -NEG_EIG_TOL {
            return Err(SalientError::Numerical(format!("product eigenvalue {} below tolerance", v)));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let d2 = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

/// Frechet distance over [`feature_vector`]s of two slice sets.
pub fn frechet_proxy(a: &[Slice<f32>], b: &[Slice<f32>]) -> Result<f64> {
    if a.len() <= FEATURE_DIM || b.len() <= FEATURE_DIM {
        return Err(SalientError::invalid(format!(
            "frechet_proxy needs at least {} slices per set, got {} and {}",
            FEATURE_DIM + 1,
            a.len(),
            b.len()
        )));
    }
    let fa = a.iter().map(feature_vector).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(feature_vector).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb)
}
