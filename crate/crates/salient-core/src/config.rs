//! Run configuration: one JSON document with a section per stage. Every
//! field has a default and unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::max_scales;
use crate::detection::{DetectorConfig, SweepConfig};
use crate::error::{Result, SalientError};
use crate::mask_vae::{VaeConfig, VaeTrainConfig};
use crate::model::{DenoiserConfig, LossWeights, SamplerConfig, TrainConfig};
use crate::phantom::{derive_seed, CohortConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub sampler: SamplerConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::desk(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub model: VaeConfig,
    pub train: VaeTrainConfig,
    /// Mask volumes drawn by `gen-masks`.
    pub samples: usize,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self { model: VaeConfig::default(), train: VaeTrainConfig::default(), samples: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub ms_ssim_scales: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { ms_ssim_scales: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: CohortConfig,
    pub diffusion: DiffusionSection,
    pub vae: VaeSection,
    pub detector: DetectorConfig,
    pub sweep: SweepConfig,
    pub analysis: AnalysisSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| SalientError::Config(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SalientError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::from_json(&text)
    }

    /// Checks every section; any failure is reported as a configuration error.
    pub fn validate(&self) -> Result<()> {
        let as_config = |r: Result<()>, section: &str| {
            r.map_err(|e| match e {
                SalientError::Config(m) => SalientError::Config(format!("{}: {}", section, m)),
                other => SalientError::Config(format!("{}: {}", section, other)),
            })
        };
        as_config(self.data.validate(), "data")?;
        as_config(self.diffusion.model.validate(), "diffusion.model")?;
        as_config(self.diffusion.loss.validate(), "diffusion.loss")?;
        as_config(self.diffusion.sampler.scales.validate(), "diffusion.sampler")?;
        if self.diffusion.sampler.steps == 0 || self.diffusion.sampler.steps > self.diffusion.train.timesteps {
            return Err(SalientError::Config("diffusion.sampler: steps must be in 1..=timesteps".into()));
        }
        as_config(self.vae.model.validate(), "vae.model")?;
        as_config(self.detector.validate(), "detector")?;
        as_config(self.sweep.validate(), "sweep")?;
        let feasible = max_scales(self.data.phantom.height, self.data.phantom.width);
        if self.analysis.ms_ssim_scales == 0 || self.analysis.ms_ssim_scales > feasible {
            return Err(SalientError::Config(format!(
                "analysis: ms_ssim_scales must be in 1..={} for {}x{} slices",
                feasible, self.data.phantom.height, self.data.phantom.width
            )));
        }
        Ok(())
    }

    /// Replace every stage seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = derive_seed(seed, 0);
        self.diffusion.train.seed = derive_seed(seed, 1);
        self.vae.train.seed = derive_seed(seed, 2);
        self.detector.seed = derive_seed(seed, 3);
        self.sweep.seed = derive_seed(seed, 4);
        self
    }

    /// Hex SHA-256 of the compact JSON serialisation.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [
            r#"{"extra": 1}"#,
            r#"{"data": {"prevalance": 0.1}}"#,
            r#"{"diffusion": {"train": {"optimizer": {"learning_rate": 1}}}}"#,
            r#"{"diffusion": {"loss": {"weight_map": {"base": [1,1,1,1], "beta": 1, "dilation": 1, "x": 0}}}}"#,
            r#"{"vae": {"train": {"weights": {"kl": 1}}}}"#,
            r#"{"detector": {"blocks": 3, "mga_on": true}}"#,
            r#"{"sweep": {"dose": [0]}}"#,
            r#"{"analysis": {"scales": 3}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(SalientError::Config(_))), "{}", doc);
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            r#"{"data": {"prevalence": 0}}"#,
            r#"{"sweep": {"doses": [1, 2]}}"#,
            r#"{"detector": {"focal_gamma": -1}}"#,
            r#"{"diffusion": {"sampler": {"steps": 0}}}"#,
            r#"{"data": {"phantom": {"height": 32, "width": 32}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(SalientError::Config(_))), "{}", doc);
        }
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = RunConfig::default();
        let b = a.clone().with_seed(5);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b, a.with_seed(5));
    }
}
