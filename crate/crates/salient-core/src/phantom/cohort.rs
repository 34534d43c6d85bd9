use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{gen_subject, PhantomConfig, PhantomSubject, TvrBand};
use super::salv::{read_volume, write_volume, SalvVolume};
use crate::error::{Result, SalientError};

/// SplitMix64 of `seed` mixed with a stream index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub prevalence: f64,
    pub seed: u64,
    /// Relative weights of the small / middle / large TVR bands.
    pub tvr_mix: [f64; 3],
    pub contrast: f64,
    pub split: String,
    pub phantom: PhantomConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            prevalence: 0.05,
            seed: 0,
            tvr_mix: [1.0, 1.0, 1.0],
            contrast: 0.35,
            split: "train".into(),
            phantom: PhantomConfig::default(),
        }
    }
}

impl CohortConfig {
    pub fn n_positive(&self) -> usize {
        (self.n_subjects as f64 * self.prevalence).round() as usize
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(SalientError::invalid(format!("prevalence {} outside (0, 1)", self.prevalence)));
        }
        if self.n_positive() == 0 {
            return Err(SalientError::invalid(format!(
                "{} subjects at prevalence {} round to zero positives",
                self.n_subjects, self.prevalence
            )));
        }
        if self.tvr_mix.iter().any(|&w| !(w >= 0.0)) || self.tvr_mix.iter().sum::<f64>() <= 0.0 {
            return Err(SalientError::invalid("tvr_mix weights must be nonnegative with a positive sum"));
        }
        self.phantom.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub path: String,
    pub label: u8,
    pub tvr: f64,
    pub split: String,
}

impl SubjectEntry {
    pub fn tvr_band(&self) -> Option<TvrBand> {
        TvrBand::of(self.tvr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub prevalence: f64,
    pub seed: u64,
    pub config_hash: String,
    pub subjects: Vec<SubjectEntry>,
}

impl CohortManifest {
    pub fn n_positive(&self) -> usize {
        self.subjects.iter().filter(|s| s.label == 1).count()
    }
}

const MAX_ATTEMPTS: u64 = 8;

/// Generate the cohort in memory. Exactly `round(n * prevalence)` subjects
/// are positive; a positive whose lesion cannot be placed is regenerated
/// from the next derived seed.
pub fn generate(cfg: &CohortConfig) -> Result<(CohortManifest, Vec<PhantomSubject>)> {
    cfg.validate()?;
    let n = cfg.n_subjects;
    let k = cfg.n_positive();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut positive = vec![false; n];
    for &i in &order[..k] {
        positive[i] = true;
    }
    let total: f64 = cfg.tvr_mix.iter().sum();
    let hash = cfg.hash();
    let mut subjects = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for (i, &pos) in positive.iter().enumerate() {
        let u = rng.random::<f64>() * total;
        let band = if u < cfg.tvr_mix[0] {
            TvrBand::Small
        } else if u < cfg.tvr_mix[0] + cfg.tvr_mix[1] {
            TvrBand::Middle
        } else {
            TvrBand::Large
        };
        let base = derive_seed(cfg.seed, i as u64);
        let mut attempt = 0;
        let subject = loop {
            match gen_subject(derive_seed(base, attempt), pos, band, cfg.contrast, &cfg.phantom) {
                Ok(s) => break s,
                Err(SalientError::Generation(_)) if attempt + 1 < MAX_ATTEMPTS => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        let id = format!("{}_{:04}", cfg.split, i);
        entries.push(SubjectEntry {
            path: format!("{}.salv", id),
            id,
            label: subject.label,
            tvr: subject.tvr,
            split: cfg.split.clone(),
        });
        subjects.push(subject);
    }
    Ok((CohortManifest { prevalence: cfg.prevalence, seed: cfg.seed, config_hash: hash, subjects: entries }, subjects))
}

/// Generate and write every subject as SALV plus `manifest.json` into `dir`.
pub fn gen_cohort(cfg: &CohortConfig, dir: &Path) -> Result<CohortManifest> {
    let (manifest, subjects) = generate(cfg)?;
    std::fs::create_dir_all(dir)?;
    for (e, s) in manifest.subjects.iter().zip(&subjects) {
        let vol = SalvVolume {
            depth: s.depth,
            height: s.height,
            width: s.width,
            intensity: Some(s.volume.clone()),
            mask: Some(s.mask.clone()),
        };
        write_volume(&dir.join(&e.path), &vol)?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LoadedSubject {
    pub entry: SubjectEntry,
    pub subject: PhantomSubject,
}

/// Read a cohort written by [`gen_cohort`]; labels and TVR are recomputed
/// from the stored masks and checked against the manifest.
pub fn load_cohort(dir: &Path) -> Result<(CohortManifest, Vec<LoadedSubject>)> {
    let manifest: CohortManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut out = Vec::with_capacity(manifest.subjects.len());
    for e in &manifest.subjects {
        let v = read_volume(&dir.join(&e.path))?;
        let (Some(volume), Some(mask)) = (v.intensity, v.mask) else {
            return Err(SalientError::format("flags", format!("{} lacks intensity or mask", e.path)));
        };
        let count = mask.count();
        let tvr = count as f64 / (v.depth * v.height * v.width) as f64;
        if (tvr - e.tvr).abs() > 1e-9 || u8::from(count > 0) != e.label {
            return Err(SalientError::invalid(format!("{} disagrees with its manifest entry", e.id)));
        }
        out.push(LoadedSubject {
            entry: e.clone(),
            subject: PhantomSubject {
                depth: v.depth,
                height: v.height,
                width: v.width,
                volume,
                label: e.label,
                tvr,
                contrast: f64::NAN,
                band: e.tvr_band(),
                mask,
            },
        });
    }
    Ok((manifest, out))
}
