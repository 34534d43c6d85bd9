//! Mask-conditioned wavelet-domain diffusion for paired lesion/mask synthesis,
//! together with a mask VAE, procedural phantom cohorts and a long-tail
//! detection dose-response harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training and
//! sampling use `f32`; the aliases below name the common instantiations.

pub mod analysis;
pub mod config;
pub mod detection;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod morph;
pub mod nn;
pub mod mask_vae;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod verify;
pub mod wavelet;

pub use error::{Result, SalientError};
pub use morph::{Mask, Mask3};
pub use params::ParamTree;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use wavelet::{band_stats, boundary_weight_map, dwt2, idwt2, BandStats, WeightMap, WeightMapParams};

pub type Slice32 = wavelet::Slice<f32>;
pub type Slice64 = wavelet::Slice<f64>;
pub type Coeffs32 = wavelet::WaveletCoeffs<f32>;
pub type Coeffs64 = wavelet::WaveletCoeffs<f64>;
pub type Params32 = ParamTree<f32>;
pub type Params64 = ParamTree<f64>;
