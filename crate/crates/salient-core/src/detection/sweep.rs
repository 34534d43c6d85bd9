use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregate::{Aggregator, GatedAggregator};
use super::metrics::{auprc, auroc};
use super::model::{AggregatorMode, Detector, DetectorConfig, TrainSlice};
use super::train::{score_slices, subject_slices, train_detector, RoiCrop};
use crate::error::{Result, SalientError};
use crate::params::ParamTree;
use crate::phantom::{derive_seed, CohortConfig, PairedSample, PhantomSubject, TvrBand};

pub const REPORT_HEADER: &str = "seed_size,prevalence,dose,rep,auprc,auroc,delta_auprc,is_optimum";
pub const SUMMARY_HEADER: &str =
    "seed_size,prevalence,dose,reps,auprc_mean,auprc_std,auroc_mean,auroc_std,delta_auprc_mean,is_optimum";
pub const REPORT_VERSION: u32 = 1;
const MISSING: &str = "NA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Labelled positive subjects available to the detector.
    pub seed_sizes: Vec<usize>,
    pub prevalences: Vec<f64>,
    /// Synthetic positive slices per real positive slice.
    pub doses: Vec<usize>,
    pub mask_guided: bool,
    pub repetitions: usize,
    pub seed: u64,
    /// Subjects in each prevalence-controlled test cohort.
    pub n_test: usize,
    /// Negative subjects in every training cohort.
    pub train_negatives: usize,
    /// Side of the square detector crop around the placement region.
    pub crop: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed_sizes: vec![25, 50],
            prevalences: vec![0.01, 0.02, 0.03, 0.04, 0.05],
            doses: vec![0, 1, 2, 4, 8, 10],
            mask_guided: true,
            repetitions: 3,
            seed: 0,
            n_test: 200,
            train_negatives: 64,
            crop: 32,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed_sizes.is_empty() || self.seed_sizes.contains(&0) {
            return Err(SalientError::Config("seed_sizes must be nonempty and positive".into()));
        }
        if self.prevalences.is_empty() || self.prevalences.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(SalientError::Config("prevalences must be nonempty and in (0, 1)".into()));
        }
        if !self.doses.contains(&0) {
            return Err(SalientError::Config("doses must include 0, the reference for delta_auprc".into()));
        }
        if self.repetitions == 0 || self.train_negatives == 0 {
            return Err(SalientError::Config("repetitions and train_negatives must be positive".into()));
        }
        for &p in &self.prevalences {
            let k = self.test_positives(p);
            if k == 0 || k >= self.n_test {
                return Err(SalientError::Config(format!(
                    "prevalence {} gives {} positives in a test cohort of {}",
                    p, k, self.n_test
                )));
            }
        }
        Ok(())
    }

    pub fn test_positives(&self, p: f64) -> usize {
        (self.n_test as f64 * p).round() as usize
    }

    fn sorted<T: Copy + PartialOrd>(v: &[T]) -> Vec<T> {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }

    /// Training pool with twice the largest seed of positives, and a test
    /// pool large enough for every prevalence.
    pub fn cohorts(&self, base: &CohortConfig) -> Result<(CohortConfig, CohortConfig)> {
        self.validate()?;
        let pos = 2 * self.seed_sizes.iter().max().unwrap();
        let n = pos + self.train_negatives;
        let train = CohortConfig {
            n_subjects: n,
            prevalence: pos as f64 / n as f64,
            seed: derive_seed(self.seed, 1),
            split: "train".into(),
            ..base.clone()
        };
        let ks: Vec<usize> = self.prevalences.iter().map(|&p| self.test_positives(p)).collect();
        let tpos = *ks.iter().max().unwrap();
        let tneg = self.n_test - ks.iter().min().unwrap();
        let test = CohortConfig {
            n_subjects: tpos + tneg,
            prevalence: tpos as f64 / (tpos + tneg) as f64,
            seed: derive_seed(self.seed, 2),
            split: "test".into(),
            ..base.clone()
        };
        Ok((train, test))
    }
}

/// A subject reduced to its cropped slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSlices {
    pub label: u8,
    pub band: Option<TvrBand>,
    pub slices: Vec<TrainSlice>,
}

impl SubjectSlices {
    pub fn from_phantom(s: &PhantomSubject, crop: &RoiCrop) -> Result<Self> {
        Ok(Self { label: s.label, band: s.band, slices: subject_slices(s, crop)? })
    }

    pub fn positive_slices(&self) -> impl Iterator<Item = &TrainSlice> {
        self.slices.iter().filter(|s| s.label == 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepData {
    pub train: Vec<SubjectSlices>,
    pub test: Vec<SubjectSlices>,
    pub synthetic: Vec<TrainSlice>,
}

impl SweepData {
    pub fn new(train: &[PhantomSubject], test: &[PhantomSubject], synthetic: &[PairedSample], crop: &RoiCrop) -> Result<Self> {
        let conv = |v: &[PhantomSubject]| v.iter().map(|s| SubjectSlices::from_phantom(s, crop)).collect::<Result<Vec<_>>>();
        let synthetic = synthetic
            .iter()
            .filter(|p| p.label == 1)
            .map(|p| Ok(TrainSlice { slice: crop.slice(&p.slice)?, mask: Some(crop.mask(&p.mask)?), label: 1 }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train: conv(train)?, test: conv(test)?, synthetic })
    }

    fn by_label(v: &[SubjectSlices], label: u8) -> Vec<usize> {
        (0..v.len()).filter(|&i| v[i].label == label).collect()
    }
}

/// Scores subjects with a trained detector and aggregator.
#[derive(Clone, Debug)]
pub struct SubjectScorer {
    pub detector: Detector,
    pub params: ParamTree<f32>,
    pub aggregator: Aggregator,
}

impl SubjectScorer {
    pub fn score(&self, s: &SubjectSlices) -> Result<f64> {
        let sc = score_slices(&self.detector, &s.slices, &self.params)?;
        self.aggregator.aggregate_subject(&sc.probs, &sc.embeddings)
    }

    pub fn score_all(&self, v: &[SubjectSlices]) -> Result<Vec<f64>> {
        v.iter().map(|s| self.score(s)).collect()
    }
}

/// Train the detector on `train` subjects plus synthetic pairs, then fit
/// the aggregator on the same subjects.
pub fn fit_scorer(
    cfg: &DetectorConfig,
    positives: &[&SubjectSlices],
    negatives: &[&SubjectSlices],
    synthetic: &[TrainSlice],
    dose: usize,
) -> Result<SubjectScorer> {
    let det = Detector::new(cfg.clone())?;
    let real: Vec<TrainSlice> = positives.iter().flat_map(|s| s.positive_slices().cloned()).collect();
    let neg: Vec<TrainSlice> = negatives.iter().flat_map(|s| s.slices.iter().cloned()).collect();
    let init = det.init_params::<f32>(cfg.seed);
    let trained = train_detector(&det, &real, synthetic, &neg, dose, init)?;
    let aggregator = match cfg.aggregator {
        AggregatorMode::NoisyOr => Aggregator::NoisyOr,
        AggregatorMode::Gated => {
            let subjects = positives
                .iter()
                .chain(negatives)
                .map(|s| Ok((score_slices(&det, &s.slices, &trained.params)?.embeddings, s.label)))
                .collect::<Result<Vec<_>>>()?;
            let agg = GatedAggregator::init(cfg.embedding_dim(), cfg.aggregator_hidden, derive_seed(cfg.seed, 7));
            Aggregator::Gated(agg.fit(&subjects, cfg.aggregator_iterations, 1e-2)?)
        }
    };
    Ok(SubjectScorer { detector: det, params: trained.params, aggregator })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoseRow {
    pub seed_size: usize,
    pub prevalence: f64,
    pub dose: usize,
    pub rep: usize,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub delta_auprc: Option<f64>,
    pub is_optimum: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub format_version: u32,
    pub aggregator: AggregatorMode,
    pub checkpoint: String,
    pub mask_guided: bool,
    /// `"seed_size/dose/rep: error"` for every cell that failed.
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoseResponseReport {
    pub rows: Vec<DoseRow>,
    pub meta: ReportMeta,
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => write!(out, "{:.6}", v).unwrap(),
        None => out.push_str(MISSING),
    }
}

fn parse_opt(s: &str, field: &'static str) -> Result<Option<f64>> {
    if s == MISSING {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| SalientError::format(field, format!("`{}` is not a number", s)))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Highest value wins, ties go to the smaller dose; `None` entries never win.
fn argmax_dose(cands: &[(usize, Option<f64>)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(d, v) in cands {
        if let Some(v) = v {
            match best {
                Some((bd, bv)) if v < bv || (v == bv && d > bd) => {}
                _ => best = Some((d, v)),
            }
        }
    }
    best.map(|b| b.0)
}

impl DoseResponseReport {
    /// Rows in `(seed_size, prevalence, dose, rep)` order with deltas and
    /// per-repetition optimum flags filled in.
    pub fn assemble(mut rows: Vec<DoseRow>, meta: ReportMeta) -> Self {
        rows.sort_by(|a, b| {
            (a.seed_size, a.prevalence, a.rep, a.dose).partial_cmp(&(b.seed_size, b.prevalence, b.rep, b.dose)).unwrap()
        });
        let mut groups: BTreeMap<(usize, u64, usize), Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            groups.entry((r.seed_size, r.prevalence.to_bits(), r.rep)).or_default().push(i);
        }
        for idx in groups.values() {
            let base = idx.iter().find(|&&i| rows[i].dose == 0).and_then(|&i| rows[i].auprc);
            let cands: Vec<(usize, Option<f64>)> = idx.iter().map(|&i| (rows[i].dose, rows[i].auprc)).collect();
            let best = argmax_dose(&cands);
            for &i in idx {
                let r = &mut rows[i];
                r.delta_auprc = match (r.auprc, base) {
                    (Some(a), Some(b)) => Some(if r.dose == 0 { 0.0 } else { a - b }),
                    _ => None,
                };
                r.is_optimum = Some(r.dose) == best;
            }
        }
        rows.sort_by(|a, b| {
            (a.seed_size, a.prevalence, a.dose, a.rep).partial_cmp(&(b.seed_size, b.prevalence, b.dose, b.rep)).unwrap()
        });
        Self { rows, meta }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{:.6},{},{},", r.seed_size, r.prevalence, r.dose, r.rep).unwrap();
            fmt_opt(&mut out, r.auprc);
            out.push(',');
            fmt_opt(&mut out, r.auroc);
            out.push(',');
            fmt_opt(&mut out, r.delta_auprc);
            writeln!(out, ",{}", u8::from(r.is_optimum)).unwrap();
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<DoseRow>> {
        let mut lines = text.split('\n');
        if lines.next() != Some(REPORT_HEADER) {
            return Err(SalientError::format("header", "report header does not match"));
        }
        if !text.ends_with('\n') {
            return Err(SalientError::format("line", "report must end with a newline"));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(SalientError::format("line", format!("{} fields in `{}`", f.len(), line)));
            }
            let int = |s: &str, field: &'static str| {
                s.parse::<usize>().map_err(|_| SalientError::format(field, format!("`{}` is not an integer", s)))
            };
            rows.push(DoseRow {
                seed_size: int(f[0], "seed_size")?,
                prevalence: parse_opt(f[1], "prevalence")?.ok_or_else(|| SalientError::format("prevalence", "missing"))?,
                dose: int(f[2], "dose")?,
                rep: int(f[3], "rep")?,
                auprc: parse_opt(f[4], "auprc")?,
                auroc: parse_opt(f[5], "auroc")?,
                delta_auprc: parse_opt(f[6], "delta_auprc")?,
                is_optimum: match f[7] {
                    "0" => false,
                    "1" => true,
                    s => return Err(SalientError::format("is_optimum", format!("`{}` is not 0 or 1", s))),
                },
            });
        }
        Ok(rows)
    }

    /// Mean and standard deviation over repetitions per cell; the optimum is
    /// the dose with the best mean AUPRC in each `(seed_size, prevalence)`.
    pub fn summary_csv(&self) -> String {
        let mut cells: BTreeMap<(usize, u64, usize), Vec<&DoseRow>> = BTreeMap::new();
        for r in &self.rows {
            cells.entry((r.seed_size, r.prevalence.to_bits(), r.dose)).or_default().push(r);
        }
        let stats = |rs: &[&DoseRow], f: fn(&DoseRow) -> Option<f64>| {
            let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
            if v.len() == rs.len() && !v.is_empty() {
                Some(mean_std(&v))
            } else {
                None
            }
        };
        let mut best: BTreeMap<(usize, u64), Vec<(usize, Option<f64>)>> = BTreeMap::new();
        for (&(s, p, d), rs) in &cells {
            best.entry((s, p)).or_default().push((d, stats(rs, |r| r.auprc).map(|m| m.0)));
        }
        let best: BTreeMap<(usize, u64), Option<usize>> = best.into_iter().map(|(k, v)| (k, argmax_dose(&v))).collect();
        let mut keys: Vec<_> = cells.keys().copied().collect();
        keys.sort_by(|a, b| (a.0, f64::from_bits(a.1), a.2).partial_cmp(&(b.0, f64::from_bits(b.1), b.2)).unwrap());
        let mut out = String::from(SUMMARY_HEADER);
        out.push('\n');
        for k in keys {
            let rs = &cells[&k];
            write!(out, "{},{:.6},{},{},", k.0, f64::from_bits(k.1), k.2, rs.len()).unwrap();
            for f in [|r: &DoseRow| r.auprc, |r: &DoseRow| r.auroc] {
                let m = stats(rs, f);
                fmt_opt(&mut out, m.map(|m| m.0));
                out.push(',');
                fmt_opt(&mut out, m.map(|m| m.1));
                out.push(',');
            }
            fmt_opt(&mut out, stats(rs, |r| r.delta_auprc).map(|m| m.0));
            writeln!(out, ",{}", u8::from(best[&(k.0, k.1)] == Some(k.2))).unwrap();
        }
        out
    }
}

/// Per-repetition subject subsets: training positives and the test ordering.
struct RepDraw {
    train_pos: Vec<usize>,
    test_pos: Vec<usize>,
    test_neg: Vec<usize>,
    synthetic: Vec<usize>,
}

fn rep_draw(data: &SweepData, seed: u64) -> RepDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_pos = SweepData::by_label(&data.train, 1);
    train_pos.shuffle(&mut rng);
    let mut test_pos = SweepData::by_label(&data.test, 1);
    test_pos.shuffle(&mut rng);
    let mut test_neg = SweepData::by_label(&data.test, 0);
    test_neg.shuffle(&mut rng);
    let mut synthetic: Vec<usize> = (0..data.synthetic.len()).collect();
    synthetic.shuffle(&mut rng);
    RepDraw { train_pos, test_pos, test_neg, synthetic }
}

/// Synthetic pairs the sweep will draw: the largest dose times the most real
/// positive slices any `(seed_size, rep)` cell trains on.
pub fn synthetic_needed(sweep: &SweepConfig, data: &SweepData) -> usize {
    let dmax = sweep.doses.iter().copied().max().unwrap_or(0);
    let mut need = 0;
    for rep in 0..sweep.repetitions {
        let draw = rep_draw(data, derive_seed(sweep.seed, rep as u64));
        for &s in &sweep.seed_sizes {
            let real: usize = draw.train_pos.iter().take(s).map(|&i| data.train[i].positive_slices().count()).sum();
            need = need.max(dmax * real);
        }
    }
    need
}

/// Train and score one `(seed_size, dose, rep)` cell; returns AUPRC/AUROC per
/// prevalence.
fn run_cell(
    sweep: &SweepConfig,
    det_cfg: &DetectorConfig,
    data: &SweepData,
    draw: &RepDraw,
    seed_size: usize,
    dose: usize,
    det_seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if draw.train_pos.len() < seed_size {
        return Err(SalientError::Config(format!(
            "seed size {} exceeds the {} positive training subjects",
            seed_size,
            draw.train_pos.len()
        )));
    }
    let positives: Vec<&SubjectSlices> = draw.train_pos[..seed_size].iter().map(|&i| &data.train[i]).collect();
    let negatives: Vec<&SubjectSlices> = data.train.iter().filter(|s| s.label == 0).take(sweep.train_negatives).collect();
    let synthetic: Vec<TrainSlice> = draw.synthetic.iter().map(|&i| data.synthetic[i].clone()).collect();
    let cfg = DetectorConfig { mga: sweep.mask_guided, seed: det_seed, ..det_cfg.clone() };
    let scorer = fit_scorer(&cfg, &positives, &negatives, &synthetic, dose)?;
    let k_max = sweep.prevalences.iter().map(|&p| sweep.test_positives(p)).max().unwrap();
    let n_neg = sweep.n_test - sweep.prevalences.iter().map(|&p| sweep.test_positives(p)).min().unwrap();
    if draw.test_pos.len() < k_max || draw.test_neg.len() < n_neg {
        return Err(SalientError::Config("test pool smaller than the prevalence grid needs".into()));
    }
    let pos_scores: Vec<f64> = draw.test_pos[..k_max].iter().map(|&i| scorer.score(&data.test[i])).collect::<Result<_>>()?;
    let neg_scores: Vec<f64> = draw.test_neg[..n_neg].iter().map(|&i| scorer.score(&data.test[i])).collect::<Result<_>>()?;
    sweep
        .prevalences
        .iter()
        .map(|&p| {
            let k = sweep.test_positives(p);
            let scores: Vec<f64> = pos_scores[..k].iter().chain(&neg_scores[..sweep.n_test - k]).copied().collect();
            let labels: Vec<u8> = (0..sweep.n_test).map(|i| u8::from(i < k)).collect();
            Ok((auprc(&scores, &labels)?, auroc(&scores, &labels)?))
        })
        .collect()
}

/// Every `(seed_size, prevalence, dose)` cell for each repetition. The detector
/// is trained once per `(seed_size, dose, rep)` and scored on every test
/// prevalence; within a repetition all doses share the training subjects,
/// the synthetic ordering and the initialisation.
pub fn dose_response_sweep(sweep: &SweepConfig, det_cfg: &DetectorConfig, data: &SweepData) -> Result<DoseResponseReport> {
    sweep.validate()?;
    det_cfg.validate()?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for rep in 0..sweep.repetitions {
        let rep_seed = derive_seed(sweep.seed, rep as u64);
        let draw = rep_draw(data, rep_seed);
        for &s in &SweepConfig::sorted(&sweep.seed_sizes) {
            let det_seed = derive_seed(rep_seed, s as u64 + 1);
            for &d in &SweepConfig::sorted(&sweep.doses) {
                let res = run_cell(sweep, det_cfg, data, &draw, s, d, det_seed);
                if let Err(e) = &res {
                    missing.push(format!("{}/{}/{}: {}", s, d, rep, e));
                }
                for (j, &p) in sweep.prevalences.iter().enumerate() {
                    let m = res.as_ref().ok().map(|v| v[j]);
                    rows.push(DoseRow {
                        seed_size: s,
                        prevalence: p,
                        dose: d,
                        rep,
                        auprc: m.map(|m| m.0),
                        auroc: m.map(|m| m.1),
                        delta_auprc: None,
                        is_optimum: false,
                    });
                }
            }
        }
    }
    let meta = ReportMeta {
        format_version: REPORT_VERSION,
        aggregator: det_cfg.aggregator,
        checkpoint: "final".into(),
        mask_guided: sweep.mask_guided,
        missing,
    };
    Ok(DoseResponseReport::assemble(rows, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: TvrBand,
    pub n_positive: usize,
    pub n_negative: usize,
    pub auprc: f64,
    pub auroc: f64,
    pub baseline_auprc: f64,
    pub baseline_auroc: f64,
    pub delta_auprc: f64,
    pub delta_auroc: f64,
}

/// Each band's positives pooled against all negatives. Bands without
/// positives come back as `None`.
pub fn tvr_stratified(
    scores: &[f64],
    baseline: &[f64],
    labels: &[u8],
    bands: &[Option<TvrBand>],
) -> Result<Vec<(TvrBand, Option<BandMetrics>)>> {
    if scores.len() != labels.len() || baseline.len() != labels.len() || bands.len() != labels.len() {
        return Err(SalientError::invalid("scores, labels and bands differ in length"));
    }
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    TvrBand::ALL
        .into_iter()
        .map(|band| {
            let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1 && bands[i] == Some(band)).collect();
            if pos.is_empty() || neg.is_empty() {
                return Ok((band, None));
            }
            let idx: Vec<usize> = pos.iter().chain(&neg).copied().collect();
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let (s, b) = (pick(scores), pick(baseline));
            let (ap, roc, bap, broc) = (auprc(&s, &y)?, auroc(&s, &y)?, auprc(&b, &y)?, auroc(&b, &y)?);
            Ok((
                band,
                Some(BandMetrics {
                    band,
                    n_positive: pos.len(),
                    n_negative: neg.len(),
                    auprc: ap,
                    auroc: roc,
                    baseline_auprc: bap,
                    baseline_auroc: broc,
                    delta_auprc: ap - bap,
                    delta_auroc: roc - broc,
                }),
            ))
        })
        .collect()
}

/// Score `test` with both scorers and stratify by TVR band.
pub fn tvr_stratified_eval(
    treatment: &SubjectScorer,
    baseline: &SubjectScorer,
    test: &[SubjectSlices],
) -> Result<Vec<(TvrBand, Option<BandMetrics>)>> {
    let s = treatment.score_all(test)?;
    let b = baseline.score_all(test)?;
    let labels: Vec<u8> = test.iter().map(|t| t.label).collect();
    let bands: Vec<Option<TvrBand>> = test.iter().map(|t| t.band).collect();
    tvr_stratified(&s, &b, &labels, &bands)
}
