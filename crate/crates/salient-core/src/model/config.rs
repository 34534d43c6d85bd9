use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};
use crate::wavelet::WeightMapParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Encoder/decoder resolution levels.
    pub levels: usize,
    pub base_channels: usize,
    /// Channels double per level up to `base_channels * max_channel_mult`.
    pub max_channel_mult: usize,
    /// Self-attention is applied at this many of the deepest levels.
    pub attention_levels: usize,
    /// Sinusoidal time-embedding width; the MLP widens it 2x.
    pub time_dim: usize,
    /// Axial offsets of the neighbour slices fed as conditioning.
    pub neighbor_offsets: Vec<i32>,
    /// Also feed the LH/HL bands of each neighbour.
    pub neighbor_detail_bands: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 32,
            max_channel_mult: 4,
            attention_levels: 2,
            time_dim: 64,
            neighbor_offsets: vec![-1, 1],
            neighbor_detail_bands: false,
        }
    }
}

impl DenoiserConfig {
    /// Three levels of 32/64/64 channels, attention only at the bottom.
    pub fn desk() -> Self {
        Self { levels: 3, attention_levels: 1, max_channel_mult: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(SalientError::Config(format!("denoiser needs at least 2 levels, got {}", self.levels)));
        }
        if self.attention_levels > self.levels {
            return Err(SalientError::Config("attention_levels exceeds levels".into()));
        }
        if self.max_channel_mult == 0 {
            return Err(SalientError::Config("max_channel_mult must be positive".into()));
        }
        if self.base_channels == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(SalientError::Config("base_channels must be positive and time_dim positive and even".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(16)).min(self.max_channel_mult)
    }

    pub fn cond_channels(&self) -> usize {
        let per = if self.neighbor_detail_bands { 3 } else { 1 };
        1 + per * self.neighbor_offsets.len()
    }

    pub fn emb_dim(&self) -> usize {
        2 * self.time_dim
    }

    /// Slices must halve cleanly at every level of the wavelet grid.
    pub fn check_slice(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(SalientError::Config(format!(
                "slice {}x{} is not divisible by 2^{} = {}",
                h, w, self.levels, div
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub lambda_lh: f64,
    pub lambda_hl: f64,
    pub lambda_hh: f64,
    pub lambda_edge: f64,
    pub lambda_sat: f64,
    pub weight_map: WeightMapParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mu: 0.1,
            lambda_sigma: 0.1,
            lambda_lh: 0.1,
            lambda_hl: 0.1,
            lambda_hh: 0.05,
            lambda_edge: 0.1,
            lambda_sat: 1.0,
            weight_map: WeightMapParams::default(),
        }
    }
}

impl LossWeights {
    /// Reconstruction term only.
    pub fn wavelet_only() -> Self {
        Self {
            lambda_mu: 0.0,
            lambda_sigma: 0.0,
            lambda_lh: 0.0,
            lambda_hl: 0.0,
            lambda_hh: 0.0,
            lambda_edge: 0.0,
            lambda_sat: 0.0,
            ..Self::default()
        }
    }

    pub fn hf(&self) -> [f64; 3] {
        [self.lambda_lh, self.lambda_hl, self.lambda_hh]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mu,
            self.lambda_sigma,
            self.lambda_lh,
            self.lambda_hl,
            self.lambda_hh,
            self.lambda_edge,
            self.lambda_sat,
        ];
        if all.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(SalientError::invalid("loss weights must be finite and nonnegative"));
        }
        if self.weight_map.base.iter().any(|&v| !(v >= 0.0)) || !(self.weight_map.beta >= 0.0) {
            return Err(SalientError::invalid("weight map parameters must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceScales {
    pub s_mask: f64,
    pub s_nei0: f64,
    /// Exponent of the `(t / T)^p` decay of the neighbour scale.
    pub decay: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self { s_mask: 2.0, s_nei0: 1.0, decay: 1.0 }
    }
}

impl GuidanceScales {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s_mask.is_finite()
            && self.s_nei0.is_finite()
            && self.decay.is_finite()
            && self.s_mask >= 0.0
            && self.s_nei0 >= 0.0
            && self.decay >= 0.0;
        if !ok {
            return Err(SalientError::invalid("guidance scales must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn s_nei(&self, t: usize, steps: usize) -> f64 {
        self.s_nei0 * (t as f64 / steps as f64).powf(self.decay)
    }
}
