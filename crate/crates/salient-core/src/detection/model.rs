use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};
use crate::morph::Mask;
use crate::nn::conv::ConvSpec;
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{conv, init_conv, init_linear, linear};
use crate::params::{Init, ParamTree, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::Slice;

pub const FOCAL_CLAMP: f64 = 1e-7;
/// Spatial reduction between the input slice and the attention grid.
pub const ATTN_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    Gated,
    NoisyOr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub blocks: usize,
    pub base_channels: usize,
    pub mga: bool,
    pub lambda_attn: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub aggregator: AggregatorMode,
    pub aggregator_hidden: usize,
    pub aggregator_iterations: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            base_channels: 16,
            mga: true,
            lambda_attn: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            epochs: 4,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            aggregator: AggregatorMode::Gated,
            aggregator_hidden: 16,
            aggregator_iterations: 200,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 || self.base_channels == 0 {
            return Err(SalientError::Config("detector needs at least 2 blocks and positive width".into()));
        }
        if !(self.lambda_attn >= 0.0 && self.focal_alpha >= 0.0 && self.focal_gamma >= 0.0) {
            return Err(SalientError::Config("lambda_attn, focal_alpha and focal_gamma must be nonnegative".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(SalientError::Config("detector batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, b: usize) -> usize {
        self.base_channels << b
    }

    pub fn embedding_dim(&self) -> usize {
        self.channels(self.blocks - 1)
    }
}

/// `y = 1`: `-a (1-p)^g ln p`; `y = 0`: `-(1-a) p^g ln(1-p)`, with `p`
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(p: f64, y: u8, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    if y == 1 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

pub fn focal_loss_graph<T: Scalar>(g: &mut Graph<T>, logit: Var, y: u8, alpha: f64, gamma: f64) -> Var {
    let p = g.sigmoid(logit);
    let p = g.clamp(p, T::c(FOCAL_CLAMP), T::c(1.0 - FOCAL_CLAMP));
    // q is the probability of the true class
    let q = if y == 1 {
        p
    } else {
        let n = g.scale(p, -T::one());
        g.add_scalar(n, T::one())
    };
    let lq = g.ln(q);
    let w = if y == 1 { alpha } else { 1.0 - alpha };
    let loss = if gamma == 0.0 {
        lq
    } else {
        let one_minus = g.scale(q, -T::one());
        let one_minus = g.add_scalar(one_minus, T::one());
        let l = g.ln(one_minus);
        let l = g.scale(l, T::c(gamma));
        let f = g.exp(l);
        g.mul(f, lq)
    };
    g.scale(loss, T::c(-w))
}

/// Lesion mask on the attention grid (4x4 max-pool).
pub fn attention_target(mask: &Mask) -> Result<Mask> {
    mask.max_pool(ATTN_STRIDE)
}

/// `lambda * mean((attention - resized mask)^2)`.
pub fn attention_alignment_loss(attention: &[f64], target: &Mask, lambda: f64) -> Result<f64> {
    if attention.len() != target.data.len() {
        return Err(SalientError::dim(format!("{} attention cells for a {} cell mask", attention.len(), target.data.len())));
    }
    let mse = attention.iter().zip(&target.data).map(|(&a, &m)| (a - m as f64).powi(2)).sum::<f64>()
        / attention.len() as f64;
    Ok(lambda * mse)
}

pub fn attention_alignment_graph<T: Scalar>(g: &mut Graph<T>, attention: Var, target: &Mask, lambda: f64) -> Var {
    let shape = g.shape(attention).to_vec();
    let t = g.constant(Tensor::from_vec(&shape, target.to_real()).unwrap());
    let d = g.sub(attention, t);
    let d = g.square(d);
    let m = g.mean(d);
    g.scale(m, T::c(lambda))
}

#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    pub logit: Var,
    pub attention: Var,
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamTree<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let k = [3, 3];
        let mut cin = 1;
        for b in 0..self.config.blocks {
            let c = self.config.channels(b);
            init_conv(&mut init, &format!("block{b}.conv"), c, cin, &k, 1.0);
            init_conv(&mut init, &format!("block{b}.down"), c, c, &k, 1.0);
            cin = c;
        }
        init_conv(&mut init, "mga.proj", 1, self.config.channels(1), &[1, 1], 1.0);
        init_linear(&mut init, "head", 1, self.config.embedding_dim(), 1.0);
        init.finish()
    }

    pub fn check_slice(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << self.config.blocks;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(SalientError::dim(format!("{}x{} slice not divisible by {}", h, w, f)));
        }
        Ok(())
    }

    /// Logit, attention grid `[1, H/4, W/4]` after the second block and the
    /// pooled embedding.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, x: Var) -> DetectorOutput {
        let mut h = x;
        let mut attention = None;
        for b in 0..self.config.blocks {
            h = conv(g, pv, &format!("block{b}.conv"), h, ConvSpec::same2d(3));
            h = g.silu(h);
            h = conv(g, pv, &format!("block{b}.down"), h, ConvSpec::down2d());
            h = g.silu(h);
            if b == 1 {
                let a = conv(g, pv, "mga.proj", h, ConvSpec::same2d(1));
                let a = g.sigmoid(a);
                if self.config.mga {
                    let c = g.shape(h)[0];
                    let gate = g.concat(&vec![a; c]);
                    let gate = g.add_scalar(gate, T::one());
                    h = g.mul(h, gate);
                }
                attention = Some(a);
            }
        }
        let embedding = g.mean_spatial(h);
        let logit = linear(g, pv, "head", embedding);
        DetectorOutput { logit, attention: attention.expect("at least two blocks"), embedding }
    }

    pub fn input<T: Scalar>(&self, slice: &Slice<f32>) -> Result<Tensor<T>> {
        self.check_slice(slice.h, slice.w)?;
        Tensor::from_vec(&[1, slice.h, slice.w], slice.data.iter().map(|&v| T::c(v as f64)).collect())
    }

    /// `(logit, attention)` for one slice.
    pub fn mga_forward<T: Scalar>(&self, slice: &Slice<f32>, params: &ParamTree<T>) -> Result<(f64, Vec<f64>)> {
        let x = self.input::<T>(slice)?;
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let x = g.constant(x);
        let out = self.forward_graph(&mut g, &pv, x);
        let logit = g.value(out.logit).item().f64();
        let att = g.value(out.attention).data().iter().map(|v| v.f64()).collect();
        Ok((logit, att))
    }

    /// Slice probability and embedding.
    pub fn embed<T: Scalar>(&self, slice: &Slice<f32>, params: &ParamTree<T>) -> Result<(f64, Vec<f64>)> {
        let x = self.input::<T>(slice)?;
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let x = g.constant(x);
        let out = self.forward_graph(&mut g, &pv, x);
        let logit = g.value(out.logit).item().f64();
        let emb = g.value(out.embedding).data().iter().map(|v| v.f64()).collect();
        Ok((1.0 / (1.0 + (-logit).exp()), emb))
    }
}

/// One training or evaluation slice. `mask` is the lesion mask when one is
/// known (real and synthetic positives, and the empty mask of negatives).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSlice {
    pub slice: Slice<f32>,
    pub mask: Option<Mask>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DetectorLoss {
    pub focal: f64,
    pub align: f64,
}

impl DetectorLoss {
    pub fn total(&self) -> f64 {
        self.focal + self.align
    }
}

impl Detector {
    fn loss_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, s: &TrainSlice) -> Result<(Var, Option<Var>)> {
        let x = g.constant(self.input::<T>(&s.slice)?);
        let out = self.forward_graph(g, pv, x);
        let focal = focal_loss_graph(g, out.logit, s.label, self.config.focal_alpha, self.config.focal_gamma);
        let align = match &s.mask {
            Some(m) if self.config.mga => {
                if m.h != s.slice.h || m.w != s.slice.w {
                    return Err(SalientError::dim(format!(
                        "mask {}x{} for a {}x{} slice",
                        m.h, m.w, s.slice.h, s.slice.w
                    )));
                }
                let t = attention_target(m)?;
                Some(attention_alignment_graph(g, out.attention, &t, self.config.lambda_attn))
            }
            _ => None,
        };
        Ok((focal, align))
    }

    /// Mean focal + alignment loss over `batch` and its parameter gradients.
    pub fn loss_and_grads<T: Scalar>(&self, batch: &[TrainSlice], params: &ParamTree<T>) -> Result<(DetectorLoss, ParamTree<T>)> {
        if batch.is_empty() {
            return Err(SalientError::invalid("empty detector batch"));
        }
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, params, true);
        let mut parts = Vec::with_capacity(2 * batch.len());
        let mut loss = DetectorLoss::default();
        for s in batch {
            let (f, a) = self.loss_graph(&mut g, &pv, s)?;
            loss.focal += g.value(f).item().f64();
            parts.push(f);
            if let Some(a) = a {
                loss.align += g.value(a).item().f64();
                parts.push(a);
            }
        }
        let n = batch.len() as f64;
        loss.focal /= n;
        loss.align /= n;
        let parts: Vec<Var> = parts.iter().map(|&p| g.reshape(p, &[1])).collect();
        let all = g.concat(&parts);
        let sum = g.sum(all);
        let total = g.scale(sum, T::c(1.0 / n));
        let grads = g.backward(total);
        Ok((loss, pv.grads(params, &grads)))
    }

    /// Loss value only, evaluated in inference mode.
    pub fn loss<T: Scalar>(&self, batch: &[TrainSlice], params: &ParamTree<T>) -> Result<DetectorLoss> {
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let mut loss = DetectorLoss::default();
        for s in batch {
            let (f, a) = self.loss_graph(&mut g, &pv, s)?;
            loss.focal += g.value(f).item().f64();
            if let Some(a) = a {
                loss.align += g.value(a).item().f64();
            }
        }
        let n = batch.len().max(1) as f64;
        loss.focal /= n;
        loss.align /= n;
        Ok(loss)
    }
}
