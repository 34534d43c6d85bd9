//! Minimal neural-network toolkit: autodiff graph, convolution kernels and
//! the reusable layer blocks shared by the denoiser, VAE and detector.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;

pub use conv::ConvSpec;
pub use graph::{sigmoid, Grads, Graph, Var};

#[cfg(test)]
mod tests;
