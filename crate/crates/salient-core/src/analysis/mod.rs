//! Realism and frequency analytics: MS-SSIM, a Frechet distance over fixed
//! wavelet-statistic features and per-slice band reports.

mod frechet;
mod report;
mod ssim;

pub use frechet::{feature_vector, frechet_distance, frechet_proxy, COV_RIDGE, FEATURE_DIM, NEG_EIG_TOL};
pub use report::{band_report, band_row, hist_bin, BandReport, BandRow, HIST_BINS};
pub use ssim::{max_scales, ms_ssim, K1, K2, SCALE_WEIGHTS, SIGMA, WINDOW};
