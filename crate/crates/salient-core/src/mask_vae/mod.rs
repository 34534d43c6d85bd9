//! Variational autoencoder over binary lesion-mask volumes.

mod model;
mod slicing;
#[cfg(test)]
mod tests;

pub use model::{
    train_vae, vae_loss, vae_loss_graph, LatentCode, MaskVae, TrainedVae, VaeConfig, VaeLossTerms, VaeLossVars, VaeLossWeights,
    VaeTrainConfig, BCE_EPS, DICE_EPS, LOG_VAR_CLAMP, LOGIT_CLAMP, MAX_EMPTY_RETRIES,
};
pub use slicing::{resample_lesion, slice_conditioning_masks, MaskVolume, Provenance};
