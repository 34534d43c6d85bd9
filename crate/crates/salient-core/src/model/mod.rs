//! Mask-conditioned wavelet denoiser: frequency-gated input modulation, the
//! conditioning stack, a time-conditioned UNet, the four-term objective and
//! structured classifier-free guidance.

mod condition;
mod config;
mod guidance;
mod loss;
mod train;
mod unet;

pub use condition::{build_condition, fsa_modulate, CondStack};
pub use config::{DenoiserConfig, GuidanceScales, LossWeights};
pub use guidance::{guidance_combine, guided_denoise, sample_slice, SamplerConfig};
pub use loss::{
    loss_aux, loss_hf_variance, loss_ll_moments, loss_wavelet, loss_and_grads, sample_loss, sample_loss_graph, total_loss, LossTerms,
    TrainingSample, AUX_DILATION,
};
pub use train::{
    draw_dropout, examples_from_volume, make_sample, normal_like, train_denoiser, DiffusionExample, Dropout, DropoutConfig,
    TrainConfig, TrainReport, TrainedDenoiser,
};
pub use unet::{Denoiser, FSA_GAINS};

#[cfg(test)]
mod tests;
