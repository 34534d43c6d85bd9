use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Detector, TrainSlice};
use crate::diffusion::{adamw_step, AdamWConfig, OptimizerState};
use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::params::ParamTree;
use crate::phantom::PhantomSubject;
use crate::scalar::Scalar;
use crate::wavelet::Slice;

/// Fixed square window around the lesion placement region. The detector
/// sees only this crop of each slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiCrop {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

impl RoiCrop {
    /// Centre a `size x size` window on `placement` `(y0, y1, x0, x1)`,
    /// shifted to stay inside the `h x w` slice.
    pub fn around(placement: (usize, usize, usize, usize), size: usize, h: usize, w: usize) -> Result<Self> {
        let (py0, py1, px0, px1) = placement;
        if size > h || size > w || py1 - py0 > size || px1 - px0 > size {
            return Err(SalientError::Placement(format!(
                "a {}x{} crop cannot cover placement {:?} in a {}x{} slice",
                size, size, placement, h, w
            )));
        }
        let start = |lo: usize, hi: usize, n: usize| ((lo + hi) / 2).saturating_sub(size / 2).min(n - size);
        Ok(Self { y0: start(py0, py1, h), x0: start(px0, px1, w), size })
    }

    pub fn full(h: usize) -> Self {
        Self { y0: 0, x0: 0, size: h }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.y0 + self.size > h || self.x0 + self.size > w {
            return Err(SalientError::dim(format!("crop {:?} outside a {}x{} slice", self, h, w)));
        }
        Ok(())
    }

    pub fn slice(&self, s: &Slice<f32>) -> Result<Slice<f32>> {
        self.check(s.h, s.w)?;
        let n = self.size;
        let data = (0..n).flat_map(|y| s.data[(self.y0 + y) * s.w + self.x0..][..n].iter().copied()).collect();
        Slice::new(n, n, data)
    }

    pub fn mask(&self, m: &Mask) -> Result<Mask> {
        self.check(m.h, m.w)?;
        let n = self.size;
        let data = (0..n).flat_map(|y| m.data[(self.y0 + y) * m.w + self.x0..][..n].iter().copied()).collect();
        Mask::from_vec(n, n, data)
    }
}

/// Cropped slices of a phantom subject, with masks.
pub fn subject_slices(s: &PhantomSubject, crop: &RoiCrop) -> Result<Vec<TrainSlice>> {
    (0..s.depth)
        .map(|z| {
            let m = crop.mask(&s.mask_slice(z))?;
            Ok(TrainSlice { slice: crop.slice(&s.slice(z))?, label: u8::from(!m.is_empty()), mask: Some(m) })
        })
        .collect()
}

/// Indices drawn for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub real: Vec<usize>,
    pub synthetic: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.real.len() + self.synthetic.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every real positive, the first `dose * n_real` synthetic pairs and as many
/// negatives as positives, drawn without replacement while the pool lasts.
pub fn epoch_plan(n_real: usize, dose: usize, n_synthetic: usize, n_negative: usize, rng: &mut ChaCha8Rng) -> Result<EpochPlan> {
    let need = dose * n_real;
    if n_synthetic < need {
        return Err(SalientError::Config(format!(
            "synthetic pool has {} pairs, dose {} over {} real positive slices needs {} (short by {})",
            n_synthetic,
            dose,
            n_real,
            need,
            need - n_synthetic
        )));
    }
    let n_pos = n_real + need;
    if n_negative == 0 && n_pos > 0 {
        return Err(SalientError::Config("no negative slices to balance the epoch".into()));
    }
    let mut negatives = Vec::with_capacity(n_pos);
    while negatives.len() < n_pos {
        let mut idx: Vec<usize> = (0..n_negative).collect();
        idx.shuffle(rng);
        idx.truncate(n_pos - negatives.len());
        negatives.extend(idx);
    }
    Ok(EpochPlan { real: (0..n_real).collect(), synthetic: (0..need).collect(), negatives })
}

#[derive(Clone, Debug)]
pub struct TrainedDetector<T> {
    pub params: ParamTree<T>,
    pub losses: Vec<f64>,
    pub epoch_sizes: Vec<EpochPlan>,
}

/// AdamW with cosine decay over all epochs; returns the final-step params.
pub fn train_detector<T: Scalar>(
    det: &Detector,
    real: &[TrainSlice],
    synthetic: &[TrainSlice],
    negatives: &[TrainSlice],
    dose: usize,
    init: ParamTree<T>,
) -> Result<TrainedDetector<T>> {
    let cfg = &det.config;
    if real.is_empty() {
        return Err(SalientError::Config("no real positive slices".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = 2 * real.len() * (1 + dose);
    let steps = cfg.epochs * per_epoch.div_ceil(cfg.batch_size);
    let mut params = init;
    let mut opt = OptimizerState::new(&params, AdamWConfig { lr: cfg.lr, total_steps: steps, ..AdamWConfig::default() });
    let mut losses = Vec::with_capacity(steps);
    let mut plans = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(real.len(), dose, synthetic.len(), negatives.len(), &mut rng)?;
        let mut order: Vec<&TrainSlice> = plan
            .real
            .iter()
            .map(|&i| &real[i])
            .chain(plan.synthetic.iter().map(|&i| &synthetic[i]))
            .chain(plan.negatives.iter().map(|&i| &negatives[i]))
            .collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSlice> = chunk.iter().map(|&s| s.clone()).collect();
            let (loss, grads) = det.loss_and_grads(&batch, &params)?;
            if !loss.total().is_finite() {
                return Err(SalientError::Numerical(format!("non-finite detector loss in epoch {}", epoch)));
            }
            adamw_step(&mut params, &grads, &mut opt)?;
            losses.push(loss.total());
        }
        plans.push(plan);
    }
    Ok(TrainedDetector { params, losses, epoch_sizes: plans })
}

/// Per-slice probability and embedding for every slice of a subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceScores {
    pub probs: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn score_slices<T: Scalar>(det: &Detector, slices: &[TrainSlice], params: &ParamTree<T>) -> Result<SliceScores> {
    let mut out = SliceScores { probs: Vec::with_capacity(slices.len()), embeddings: Vec::with_capacity(slices.len()) };
    for s in slices {
        let (p, e) = det.embed(&s.slice, params)?;
        out.probs.push(p);
        out.embeddings.push(e);
    }
    Ok(out)
}
