use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::slicing::{MaskVolume, Provenance};
use crate::diffusion::{adamw_step, ema_update, AdamWConfig, OptimizerState};
use crate::error::{Result, SalientError};
use crate::morph::Mask3;
use crate::nn::conv::ConvSpec;
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{conv, init_conv, init_linear, linear};
use crate::params::{Init, ParamTree, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_VAR_CLAMP: f64 = 10.0;
/// Decoder logits are clamped so probabilities stay strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 12.0;
pub const DICE_EPS: f64 = 1e-6;
pub const BCE_EPS: f64 = 1e-6;
pub const MAX_EMPTY_RETRIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    /// Encoder widths; each level halves every axis.
    pub channels: Vec<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { depth: 16, height: 32, width: 32, latent_dim: 32, channels: vec![8, 16, 32] }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.channels.len();
        if self.channels.is_empty() || self.channels.contains(&0) || self.latent_dim == 0 {
            return Err(SalientError::Config("vae channels and latent_dim must be positive".into()));
        }
        if [self.depth, self.height, self.width].iter().any(|&d| d == 0 || d % f != 0) {
            return Err(SalientError::Config(format!(
                "vae volume {}x{}x{} not divisible by {}",
                self.depth, self.height, self.width, f
            )));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    fn bottleneck(&self) -> [usize; 4] {
        let f = 1usize << self.channels.len();
        [*self.channels.last().unwrap(), self.depth / f, self.height / f, self.width / f]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeLossWeights {
    pub lambda_kl: f64,
    pub free_bits: f64,
    pub lambda_bnd: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self { lambda_kl: 1.0, free_bits: 0.05, lambda_bnd: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
    pub xi: Vec<T>,
    pub sample: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(mu: Vec<T>, log_var: Vec<T>, xi: Vec<T>) -> Self {
        let sample =
            mu.iter().zip(&log_var).zip(&xi).map(|((&m, &lv), &e)| m + (lv * T::c(0.5)).exp() * e).collect();
        Self { mu, log_var, xi, sample }
    }

    /// Redraw the noise with `rng`.
    pub fn reparameterize<R: Rng>(&self, rng: &mut R) -> Self {
        let xi = (0..self.mu.len()).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect();
        Self::new(self.mu.clone(), self.log_var.clone(), xi)
    }

    pub fn kl_per_dim(&self) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| 0.5 * (m.f64().powi(2) + lv.f64().exp() - lv.f64() - 1.0))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossTerms {
    pub dice: f64,
    pub bce: f64,
    pub kl: f64,
}

impl VaeLossTerms {
    pub fn total(&self, w: &VaeLossWeights) -> f64 {
        self.dice + w.lambda_bnd * self.bce + w.lambda_kl * self.kl
    }
}

fn boundary_weights<T: Scalar>(target: &Mask3) -> Vec<T> {
    target.gradient().data.iter().map(|&g| T::c(1.0 + 4.0 * g as f64)).collect()
}

/// Loss components: `1 - soft Dice`, boundary-weighted BCE (the Bernoulli
/// negative log-likelihood of each axial slice, averaged over slices) and
/// the free-bits KL `sum_d max(KL_d, fb)`.
pub fn vae_loss<T: Scalar>(pred: &[T], target: &Mask3, code: &LatentCode<T>, w: &VaeLossWeights) -> Result<VaeLossTerms> {
    if pred.len() != target.data.len() {
        return Err(SalientError::invalid(format!("{} predictions for {} voxels", pred.len(), target.data.len())));
    }
    if code.mu.len() != code.log_var.len() {
        return Err(SalientError::invalid("mu and log_var lengths differ"));
    }
    let bw = boundary_weights::<f64>(target);
    let (mut inter, mut sp, mut st, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for ((&p, &t), &wt) in pred.iter().zip(&target.data).zip(&bw) {
        let p = p.f64();
        let t = t as f64;
        inter += p * t;
        sp += p;
        st += t;
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        bce += wt * -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
    }
    let dice = 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS);
    let kl = code.kl_per_dim().into_iter().map(|k| k.max(w.free_bits)).sum();
    Ok(VaeLossTerms { dice, bce: bce / target.d as f64, kl })
}

/// Graph form of [`vae_loss`]; `pred` holds probabilities of any shape with
/// one entry per voxel.
pub fn vae_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Mask3,
    mu: Var,
    log_var: Var,
    w: &VaeLossWeights,
) -> VaeLossVars {
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::from_vec(&shape, target.to_real_vec()).unwrap());
    let inter = g.mul(pred, t);
    let inter = g.sum(inter);
    let num = g.scale(inter, T::c(2.0));
    let num = g.add_scalar(num, T::c(DICE_EPS));
    let sp = g.sum(pred);
    let den = g.add_scalar(sp, T::c(target.count() as f64 + DICE_EPS));
    let ratio = g.div(num, den);
    let dice = g.scale(ratio, -T::one());
    let dice = g.add_scalar(dice, T::one());

    let pc = g.clamp(pred, T::c(BCE_EPS), T::c(1.0 - BCE_EPS));
    let lp = g.ln(pc);
    let q = g.scale(pc, -T::one());
    let q = g.add_scalar(q, T::one());
    let lq = g.ln(q);
    let tv = target.to_real_vec::<T>();
    let bw = boundary_weights::<T>(target);
    let wt: Vec<T> = tv.iter().zip(&bw).map(|(&t, &b)| -t * b).collect();
    let wf: Vec<T> = tv.iter().zip(&bw).map(|(&t, &b)| -(T::one() - t) * b).collect();
    let wt = g.constant(Tensor::from_vec(&shape, wt).unwrap());
    let wf = g.constant(Tensor::from_vec(&shape, wf).unwrap());
    let a = g.mul(lp, wt);
    let b = g.mul(lq, wf);
    let bce = g.add(a, b);
    let bce = g.sum(bce);
    let bce = g.scale(bce, T::c(1.0 / target.d as f64));
    let bce_w = g.scale(bce, T::c(w.lambda_bnd));

    // KL_d = (mu^2 + e^lv - lv - 1) / 2; max(KL_d, fb) = fb + relu(KL_d - fb)
    let d = g.shape(mu)[0];
    let m2 = g.square(mu);
    let elv = g.exp(log_var);
    let k = g.add(m2, elv);
    let k = g.sub(k, log_var);
    let k = g.add_scalar(k, -T::one());
    let k = g.scale(k, T::c(0.5));
    let k = g.add_scalar(k, T::c(-w.free_bits));
    let k = g.relu(k);
    let k = g.sum(k);
    let k = g.add_scalar(k, T::c(w.free_bits * d as f64));
    let kl_w = g.scale(k, T::c(w.lambda_kl));

    let total = g.add(dice, bce_w);
    let total = g.add(total, kl_w);
    VaeLossVars { total, dice, bce, kl: k }
}

/// Graph nodes of the unweighted loss components and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
    pub kl: Var,
}

trait ToReal {
    fn to_real_vec<T: Scalar>(&self) -> Vec<T>;
}

impl ToReal for Mask3 {
    fn to_real_vec<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::c(v as f64)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MaskVae {
    pub config: VaeConfig,
}

impl MaskVae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamTree<T> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let k = [3, 3, 3];
        let mut cin = 1;
        for (i, &ch) in c.channels.iter().enumerate() {
            init_conv(&mut init, &format!("enc{i}"), ch, cin, &k, 1.0);
            cin = ch;
        }
        let flat: usize = self.config.bottleneck().iter().product();
        init_linear(&mut init, "enc.mu", c.latent_dim, flat, 0.1);
        init_linear(&mut init, "enc.logvar", c.latent_dim, flat, 0.1);
        init_linear(&mut init, "dec.fc", flat, c.latent_dim, 1.0);
        let n = c.channels.len();
        for i in 0..n {
            let cin = c.channels[n - 1 - i];
            let cout = if i + 1 < n { c.channels[n - 2 - i] } else { 1 };
            init_conv(&mut init, &format!("dec{i}"), cout, cin, &k, 1.0);
        }
        init.finish()
    }

    fn check_volume(&self, m: &Mask3) -> Result<()> {
        let c = &self.config;
        if (m.d, m.h, m.w) != (c.depth, c.height, c.width) {
            return Err(SalientError::dim(format!(
                "mask volume {}x{}x{} is not the canonical {}x{}x{}",
                m.d, m.h, m.w, c.depth, c.height, c.width
            )));
        }
        Ok(())
    }

    pub fn input<T: Scalar>(&self, m: &Mask3) -> Result<Tensor<T>> {
        self.check_volume(m)?;
        Tensor::from_vec(&[1, m.d, m.h, m.w], m.to_real_vec())
    }

    /// Returns `(mu, log_var)` nodes, log-variance clamped.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, x: Var) -> (Var, Var) {
        let mut h = x;
        for i in 0..self.config.channels.len() {
            h = conv(g, pv, &format!("enc{i}"), h, ConvSpec::down3d());
            h = g.silu(h);
        }
        let mu = linear(g, pv, "enc.mu", h);
        let lv = linear(g, pv, "enc.logvar", h);
        let lv = g.clamp(lv, T::c(-LOG_VAR_CLAMP), T::c(LOG_VAR_CLAMP));
        (mu, lv)
    }

    /// Probability volume `[1, D, H, W]`.
    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, z: Var) -> Var {
        let b = self.config.bottleneck();
        let h = linear(g, pv, "dec.fc", z);
        let mut h = g.reshape(h, &b);
        h = g.silu(h);
        let n = self.config.channels.len();
        for i in 0..n {
            h = g.upsample(h, [2, 2, 2]);
            h = conv(g, pv, &format!("dec{i}"), h, ConvSpec::same3d(3));
            if i + 1 < n {
                h = g.silu(h);
            }
        }
        let h = g.clamp(h, T::c(-LOGIT_CLAMP), T::c(LOGIT_CLAMP));
        g.sigmoid(h)
    }

    /// Deterministic encoding; the returned code carries zero noise.
    pub fn encode<T: Scalar>(&self, vol: &MaskVolume, params: &ParamTree<T>) -> Result<LatentCode<T>> {
        let x = self.input::<T>(&vol.mask)?;
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let x = g.constant(x);
        let (mu, lv) = self.encode_graph(&mut g, &pv, x);
        let mu = g.value(mu).data().to_vec();
        let lv = g.value(lv).data().to_vec();
        let xi = vec![T::zero(); mu.len()];
        Ok(LatentCode::new(mu, lv, xi))
    }

    pub fn decode<T: Scalar>(&self, z: &[T], params: &ParamTree<T>) -> Result<Vec<T>> {
        if z.len() != self.config.latent_dim {
            return Err(SalientError::invalid(format!(
                "latent of length {} for dimension {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut g = Graph::inference();
        let pv = ParamVars::bind(&mut g, params, false);
        let z = g.constant(Tensor::from_vec(&[z.len()], z.to_vec())?);
        let p = self.decode_graph(&mut g, &pv, z);
        Ok(g.value(p).data().to_vec())
    }

    pub fn binarize<T: Scalar>(&self, probs: &[T]) -> Mask3 {
        let c = &self.config;
        Mask3 {
            d: c.depth,
            h: c.height,
            w: c.width,
            data: probs.iter().map(|&p| u8::from(p.f64() > 0.5)).collect(),
        }
    }

    /// Hard reconstruction through the posterior mean.
    pub fn reconstruct<T: Scalar>(&self, vol: &MaskVolume, params: &ParamTree<T>) -> Result<Mask3> {
        let code = self.encode(vol, params)?;
        Ok(self.binarize(&self.decode(&code.mu, params)?))
    }

    /// Prior samples binarised at 0.5; empty decodes are redrawn.
    pub fn sample_masks<T: Scalar>(&self, n: usize, seed: u64, params: &ParamTree<T>) -> Result<Vec<MaskVolume>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut found = None;
            for _ in 0..=MAX_EMPTY_RETRIES {
                let z: Vec<T> =
                    (0..self.config.latent_dim).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect();
                let m = self.binarize(&self.decode(&z, params)?);
                if m.count() > 0 {
                    found = Some(m);
                    break;
                }
            }
            match found {
                Some(mask) => out.push(MaskVolume { mask, provenance: Provenance::VaeSampled }),
                None => {
                    return Err(SalientError::Generation(format!(
                        "sample {} decoded empty {} times; the VAE looks undertrained",
                        i,
                        MAX_EMPTY_RETRIES + 1
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Loss terms and parameter gradients for one volume with noise `xi`.
    pub fn loss_and_grads<T: Scalar>(
        &self,
        vol: &MaskVolume,
        xi: &[T],
        params: &ParamTree<T>,
        w: &VaeLossWeights,
    ) -> Result<(VaeLossTerms, ParamTree<T>)> {
        let x = self.input::<T>(&vol.mask)?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, params, true);
        let x = g.constant(x);
        let (mu, lv) = self.encode_graph(&mut g, &pv, x);
        let sd = g.scale(lv, T::c(0.5));
        let sd = g.exp(sd);
        let e = g.constant(Tensor::from_vec(&[xi.len()], xi.to_vec())?);
        let noise = g.mul(sd, e);
        let z = g.add(mu, noise);
        let p = self.decode_graph(&mut g, &pv, z);
        let l = vae_loss_graph(&mut g, p, &vol.mask, mu, lv, w);
        let item = |v: Var| g.value(v).item().f64();
        let terms = VaeLossTerms { dice: item(l.dice), bce: item(l.bce), kl: item(l.kl) };
        let grads = g.backward(l.total);
        Ok((terms, pv.grads(params, &grads)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub weights: VaeLossWeights,
    /// Fraction of iterations over which the KL weight ramps linearly from
    /// zero to `weights.lambda_kl`.
    pub kl_warmup: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            optimizer: AdamWConfig { lr: 1e-2, ..AdamWConfig::default() },
            ema_decay: 0.99,
            weights: VaeLossWeights::default(),
            kl_warmup: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedVae<T> {
    pub params: ParamTree<T>,
    pub ema: ParamTree<T>,
    pub losses: Vec<f64>,
    /// Smallest per-sample free-bits KL term seen in each iteration.
    pub min_kl: Vec<f64>,
}

pub fn train_vae<T: Scalar>(
    vae: &MaskVae,
    volumes: &[MaskVolume],
    init: ParamTree<T>,
    cfg: &VaeTrainConfig,
) -> Result<TrainedVae<T>> {
    if volumes.is_empty() {
        return Err(SalientError::Config("no training volumes".into()));
    }
    if cfg.batch_size == 0 {
        return Err(SalientError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut ema = params.clone();
    let mut opt = OptimizerState::new(&params, AdamWConfig { total_steps: cfg.iterations, ..cfg.optimizer });
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut min_kl = Vec::with_capacity(cfg.iterations);
    let d = vae.config.latent_dim;
    let warm = (cfg.kl_warmup * cfg.iterations as f64).max(0.0);
    for k in 0..cfg.iterations {
        let ramp = if warm > 0.0 { ((k as f64 + 1.0) / warm).min(1.0) } else { 1.0 };
        let weights = VaeLossWeights { lambda_kl: cfg.weights.lambda_kl * ramp, ..cfg.weights };
        let mut acc = params.zeros_like();
        let mut total = 0.0;
        let mut kl_lo = f64::INFINITY;
        for _ in 0..cfg.batch_size {
            let vol = &volumes[rng.random_range(0..volumes.len())];
            let xi: Vec<T> = (0..d).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect();
            let (l, g) = vae.loss_and_grads(vol, &xi, &params, &weights)?;
            total += l.total(&weights);
            kl_lo = kl_lo.min(l.kl);
            acc.axpy(T::one(), &g);
        }
        acc.scale(T::c(1.0 / cfg.batch_size as f64));
        let loss = total / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(SalientError::Numerical(format!("non-finite vae loss at iteration {}", k)));
        }
        adamw_step(&mut params, &acc, &mut opt)?;
        let decay = cfg.ema_decay.min((1.0 + k as f64) / (10.0 + k as f64));
        ema_update(&mut ema, &params, decay)?;
        losses.push(loss);
        min_kl.push(kl_lo);
    }
    Ok(TrainedVae { params, ema, losses, min_kl })
}
