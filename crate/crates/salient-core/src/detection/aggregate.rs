use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::AggregatorMode;
use crate::diffusion::{adamw_step, AdamWConfig, OptimizerState};
use crate::error::{Result, SalientError};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::init_linear;
use crate::params::{Init, ParamTree, ParamVars};
use crate::tensor::Tensor;

pub const NOISY_OR_TOP: usize = 3;

/// `1 - prod(1 - p)` over the three largest slice probabilities.
pub fn noisy_or(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(SalientError::invalid("cannot aggregate an empty slice list"));
    }
    let mut p = probs.to_vec();
    p.sort_by(|a, b| b.total_cmp(a));
    Ok(1.0 - p.iter().take(NOISY_OR_TOP).map(|v| 1.0 - v).product::<f64>())
}

/// Gated attention pooling over slice embeddings:
/// `s_i = w . (tanh(V e_i) * sigmoid(U e_i))`, `a = softmax(s)`,
/// `p = sigmoid(head . sum_i a_i e_i + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedAggregator {
    pub params: ParamTree<f64>,
}

impl GatedAggregator {
    pub fn init(embedding_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        init.normal("agg.v", &[hidden, embedding_dim], embedding_dim, 1.0);
        init.normal("agg.u", &[hidden, embedding_dim], embedding_dim, 1.0);
        init.normal("agg.w", &[1, hidden], hidden, 1.0);
        init_linear(&mut init, "agg.head", 1, embedding_dim, 1.0);
        Self { params: init.finish() }
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.get("agg.v").map(|t| t.shape()[1]).unwrap_or(0)
    }

    fn input(&self, embeddings: &[Vec<f64>]) -> Result<Tensor<f64>> {
        let e = self.embedding_dim();
        if embeddings.is_empty() {
            return Err(SalientError::invalid("cannot aggregate an empty slice list"));
        }
        if let Some(bad) = embeddings.iter().find(|v| v.len() != e) {
            return Err(SalientError::dim(format!("slice embedding of length {}, aggregator expects {}", bad.len(), e)));
        }
        Tensor::from_vec(&[embeddings.len(), e], embeddings.concat())
    }

    /// `(logit, weights)`; `weights` is `[1, N]`.
    fn graph(&self, g: &mut Graph<f64>, pv: &ParamVars, x: Var) -> (Var, Var) {
        let n = g.shape(x)[0];
        let v = g.matmul(x, pv.get("agg.v"), false, true);
        let v = g.tanh(v);
        let u = g.matmul(x, pv.get("agg.u"), false, true);
        let u = g.sigmoid(u);
        let h = g.mul(v, u);
        let s = g.matmul(h, pv.get("agg.w"), false, true);
        let s = g.reshape(s, &[1, n]);
        let a = g.softmax_rows(s);
        let z = g.matmul(a, x, false, false);
        let y = g.matmul(z, pv.get("agg.head.w"), false, true);
        let y = g.reshape(y, &[1]);
        let y = g.add(y, pv.get("agg.head.b"));
        (y, a)
    }

    /// Subject probability and the slice weights.
    pub fn forward(&self, embeddings: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let x = self.input(embeddings)?;
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, &self.params, false);
        let x = g.constant(x);
        let (y, a) = self.graph(&mut g, &pv, x);
        let logit = g.value(y).item();
        Ok((1.0 / (1.0 + (-logit).exp()), g.value(a).data().to_vec()))
    }

    /// Class-balanced binary cross-entropy over subjects, mean over the set.
    pub fn loss_and_grads(&self, subjects: &[(Vec<Vec<f64>>, u8)]) -> Result<(f64, ParamTree<f64>)> {
        let n_pos = subjects.iter().filter(|s| s.1 == 1).count();
        let n_neg = subjects.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(SalientError::invalid("aggregator training needs both subject classes"));
        }
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, true);
        let mut terms = Vec::with_capacity(subjects.len());
        for (emb, y) in subjects {
            let x = g.constant(self.input(emb)?);
            let (logit, _) = self.graph(&mut g, &pv, x);
            let p = g.sigmoid(logit);
            let p = g.clamp(p, 1e-7, 1.0 - 1e-7);
            let (q, w) = if *y == 1 {
                (p, 0.5 / n_pos as f64)
            } else {
                let m = g.scale(p, -1.0);
                (g.add_scalar(m, 1.0), 0.5 / n_neg as f64)
            };
            let l = g.ln(q);
            terms.push(g.scale(l, -w));
        }
        let all = g.concat(&terms);
        let total = g.sum(all);
        let loss = g.value(total).item();
        let grads = g.backward(total);
        Ok((loss, pv.grads(&self.params, &grads)))
    }

    /// Full-batch training on frozen slice embeddings of labelled subjects.
    pub fn fit(mut self, subjects: &[(Vec<Vec<f64>>, u8)], iterations: usize, lr: f64) -> Result<Self> {
        let mut opt = OptimizerState::new(&self.params, AdamWConfig { lr, total_steps: iterations, ..AdamWConfig::default() });
        for k in 0..iterations {
            let (loss, grads) = self.loss_and_grads(subjects)?;
            if !loss.is_finite() {
                return Err(SalientError::Numerical(format!("non-finite aggregator loss at iteration {}", k)));
            }
            adamw_step(&mut self.params, &grads, &mut opt)?;
        }
        Ok(self)
    }
}

/// Slice-to-subject aggregation rule.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator {
    NoisyOr,
    Gated(GatedAggregator),
}

impl Aggregator {
    pub fn mode(&self) -> AggregatorMode {
        match self {
            Aggregator::NoisyOr => AggregatorMode::NoisyOr,
            Aggregator::Gated(_) => AggregatorMode::Gated,
        }
    }

    pub fn aggregate_subject(&self, probs: &[f64], embeddings: &[Vec<f64>]) -> Result<f64> {
        match self {
            Aggregator::NoisyOr => noisy_or(probs),
            Aggregator::Gated(a) => a.forward(embeddings).map(|(p, _)| p),
        }
    }
}
