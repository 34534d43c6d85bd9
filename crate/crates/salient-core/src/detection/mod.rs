//! Mask-guided slice detector, subject aggregation, ranking metrics and the
//! dose-response and TVR-stratified evaluation protocols.

mod aggregate;
mod metrics;
mod model;
mod sweep;
mod train;

pub use aggregate::{noisy_or, Aggregator, GatedAggregator, NOISY_OR_TOP};
pub use metrics::{auprc, auroc};
pub use model::{
    attention_alignment_graph, attention_alignment_loss, attention_target, focal_loss, focal_loss_graph, AggregatorMode,
    Detector, DetectorConfig, DetectorLoss, DetectorOutput, TrainSlice, ATTN_STRIDE, FOCAL_CLAMP,
};
pub use sweep::{
    dose_response_sweep, fit_scorer, synthetic_needed, tvr_stratified, tvr_stratified_eval, BandMetrics, DoseResponseReport, DoseRow, ReportMeta,
    SubjectScorer, SubjectSlices, SweepConfig, SweepData, REPORT_HEADER, REPORT_VERSION, SUMMARY_HEADER,
};
pub use train::{epoch_plan, score_slices, subject_slices, train_detector, EpochPlan, RoiCrop, SliceScores, TrainedDetector};
