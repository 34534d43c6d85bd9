//! Procedural CT-like phantom volumes with ground-truth lesions, cohorts with
//! exact prevalence, and the SALV volume container.

mod cohort;
mod generate;
mod salv;

pub use cohort::{derive_seed, gen_cohort, generate as generate_cohort, load_cohort, CohortConfig, CohortManifest, LoadedSubject, SubjectEntry};
pub use generate::{gen_subject, pair_synthetic, PairedSample, PhantomConfig, PhantomSubject, TvrBand, PLACEMENT};
pub use salv::{read_volume, read_volume_bytes, volume_bytes, write_volume, SalvVolume, FLAG_INTENSITY, FLAG_MASK, SALV_VERSION};

#[cfg(test)]
mod tests;
