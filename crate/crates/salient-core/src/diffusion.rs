//! Noise schedule, forward corruption and clean-signal-parameterised reverse
//! steps over wavelet coefficients, plus the AdamW optimiser and parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SalientError};
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::wavelet::WaveletCoeffs;

pub const ALPHA_BAR_MIN: f64 = 1e-5;
/// Envelope applied to the predicted clean coefficients before a reverse step.
pub const X0_CLAMP: f64 = 3.0;

/// Cumulative signal fractions `alpha_bar[0..=T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub offset: f64,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(SalientError::invalid(format!("timestep {} outside 1..={}", t, self.steps)));
        }
        Ok(())
    }

    /// `n` timesteps spread uniformly over `T..=1`, descending, always
    /// starting at `T`.
    pub fn strided(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps {
            return Err(SalientError::invalid(format!("sampling steps {} must lie in 1..={}", n, self.steps)));
        }
        let mut ts: Vec<usize> = (0..n)
            .map(|i| {
                let frac = (n - i) as f64 / n as f64;
                ((frac * self.steps as f64).round() as usize).clamp(1, self.steps)
            })
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// Squared-cosine cumulative schedule, normalised so `alpha_bar[0] = 1` and
/// clamped into `[1e-5, 1]`.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(SalientError::invalid("schedule needs at least one step"));
    }
    if !(offset > 0.0) || !offset.is_finite() {
        return Err(SalientError::invalid("schedule offset must be positive"));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let alpha_bar = (0..=steps).map(|t| (f(t) / f0).clamp(ALPHA_BAR_MIN, 1.0)).collect();
    Ok(NoiseSchedule { steps, offset, alpha_bar })
}

/// `sqrt(ab_t) * w0 + sqrt(1 - ab_t) * eps`.
pub fn forward_sample<T: Scalar>(
    w0: &WaveletCoeffs<T>,
    t: usize,
    eps: &WaveletCoeffs<T>,
    sched: &NoiseSchedule,
) -> Result<WaveletCoeffs<T>> {
    sched.check_t(t)?;
    if !w0.same_shape(eps) {
        return Err(SalientError::dim("noise and signal shapes differ"));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    Ok(w0.zip_map(eps, |x, e| a * x + b * e))
}

/// Posterior-mean coefficients and noise std for a jump `t -> t_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub x0: f64,
    pub xt: f64,
    pub sigma: f64,
}

pub fn step_coefficients(ab_t: f64, ab_prev: f64) -> StepCoefficients {
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let denom = 1.0 - ab_t;
    let var = (beta * (1.0 - ab_prev) / denom).max(0.0);
    StepCoefficients { x0: ab_prev.sqrt() * beta / denom, xt: alpha.sqrt() * (1.0 - ab_prev) / denom, sigma: var.sqrt() }
}

/// One reverse step `t -> t - 1`.
pub fn reverse_step<T: Scalar>(
    w_t: &WaveletCoeffs<T>,
    w0_hat: &WaveletCoeffs<T>,
    t: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &WaveletCoeffs<T>,
) -> Result<WaveletCoeffs<T>> {
    reverse_step_to(w_t, w0_hat, t, t.saturating_sub(1), sched, eta, noise)
}

/// Reverse jump `t -> t_prev` (`t_prev < t`), for strided samplers.
pub fn reverse_step_to<T: Scalar>(
    w_t: &WaveletCoeffs<T>,
    w0_hat: &WaveletCoeffs<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: &WaveletCoeffs<T>,
) -> Result<WaveletCoeffs<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(SalientError::invalid(format!("reverse jump {} -> {} is not backwards", t, t_prev)));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(SalientError::invalid("eta must lie in [0, 1]"));
    }
    if !w_t.same_shape(w0_hat) || !w_t.same_shape(noise) {
        return Err(SalientError::dim("reverse step operands differ in shape"));
    }
    let c = step_coefficients(sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (cx0, cxt, cn) = (T::c(c.x0), T::c(c.xt), T::c(eta * c.sigma));
    let lim = T::c(X0_CLAMP);
    let data = w_t
        .data
        .iter()
        .zip(&w0_hat.data)
        .zip(&noise.data)
        .map(|((&xt, &x0), &z)| cx0 * x0.max(-lim).min(lim) + cxt * xt + cn * z)
        .collect();
    Ok(WaveletCoeffs { h: w_t.h, w: w_t.w, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of steps over which the learning rate decays to zero.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, total_steps: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamTree<T>,
    pub v: ParamTree<T>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamTree<T>, config: AdamWConfig) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, config }
    }

    /// Cosine decay from `lr` to zero over `total_steps`, evaluated at the
    /// step about to be taken.
    pub fn current_lr(&self) -> f64 {
        let total = self.config.total_steps.max(1) as f64;
        let progress = (self.step as f64 / total).min(1.0);
        self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam step with bias correction, in place.
pub fn adamw_step<T: Scalar>(params: &mut ParamTree<T>, grads: &ParamTree<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if !params.congruent(grads) || !params.congruent(&state.m) {
        return Err(SalientError::dim("gradients are not congruent with parameters"));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(SalientError::Training { param: name.to_string() });
    }
    let cfg = state.config;
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let decay = T::c(1.0 - lr * cfg.weight_decay);
    let step_size = lr / bc1;
    for (((_, p), (_, g)), ((_, m), (_, v))) in
        params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let denom = (v[i].f64() / bc2).sqrt() + cfg.eps;
            p[i] = p[i] * decay - T::c(step_size * m[i].f64() / denom);
        }
    }
    Ok(())
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamTree<T>, params: &ParamTree<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(SalientError::invalid(format!("EMA decay {} outside [0, 1]", decay)));
    }
    if !ema.congruent(params) {
        return Err(SalientError::dim("EMA tree not congruent with parameters"));
    }
    let (d, r) = (T::c(decay), T::c(1.0 - decay));
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (x, &y) in e.data_mut().iter_mut().zip(p.data()) {
            *x = d * *x + r * y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_tree(v: f64) -> ParamTree<f64> {
        let mut p = ParamTree::new();
        p.insert("p", Tensor::scalar(v));
        p
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = cosine_schedule(1000, 0.008).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert_eq!(s.alpha_bar[1000], ALPHA_BAR_MIN);
        // cos^2(((0.5 + 0.008) / 1.008) * pi / 2) / cos^2((0.008 / 1.008) * pi / 2)
        assert!((s.alpha_bar[500] - 0.493_843_590_44).abs() < 1e-9, "{}", s.alpha_bar[500]);
        // the 1e-5 floor flattens the last entries when T is large
        assert!(s.alpha_bar.windows(2).all(|w| w[1] <= w[0]));
        let desk = cosine_schedule(200, 0.008).unwrap();
        assert!(desk.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(desk.alpha_bar[200] >= ALPHA_BAR_MIN);
        assert!(cosine_schedule(0, 0.008).is_err());
        assert!(cosine_schedule(10, 0.0).is_err());
    }

    #[test]
    fn strided_timesteps_descend_from_t() {
        let s = cosine_schedule(200, 0.008).unwrap();
        let ts = s.strided(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 200);
        assert_eq!(*ts.last().unwrap(), 4);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.strided(200).unwrap().len(), 200);
        assert!(s.strided(201).is_err());
    }

    #[test]
    fn forward_sample_closed_form() {
        let mut s = cosine_schedule(10, 0.008).unwrap();
        s.alpha_bar[3] = 0.25;
        let w0 = WaveletCoeffs::<f64>::new(1, 1, vec![2.0; 4]).unwrap();
        let e = WaveletCoeffs::new(1, 1, vec![1.0; 4]).unwrap();
        let out = forward_sample(&w0, 3, &e, &s).unwrap();
        assert!((out.data[0] - 1.866_025_403_8).abs() < 1e-9);
        let z = WaveletCoeffs::<f64>::zeros(1, 1);
        assert_eq!(forward_sample(&w0, 3, &z, &s).unwrap().data[0], 0.5 * 2.0);
        assert!(forward_sample(&w0, 0, &e, &s).is_err());
        assert!(forward_sample(&w0, 11, &e, &s).is_err());
    }

    #[test]
    fn final_step_returns_prediction() {
        let s = cosine_schedule(50, 0.008).unwrap();
        let wt = WaveletCoeffs::<f64>::new(1, 1, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let x0 = WaveletCoeffs::new(1, 1, vec![1.5, 0.2, -0.7, 2.9]).unwrap();
        let z = WaveletCoeffs::new(1, 1, vec![1.0; 4]).unwrap();
        let out = reverse_step(&wt, &x0, 1, &s, 0.0, &z).unwrap();
        for (a, b) in out.data.iter().zip(&x0.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_formula_fixed_point() {
        // alpha_bar[t-1] == alpha_bar[t] makes beta_t = 0: the step keeps w_t.
        let mut s = cosine_schedule(10, 0.008).unwrap();
        s.alpha_bar[4] = s.alpha_bar[5];
        let wt = WaveletCoeffs::<f64>::new(1, 1, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let out = reverse_step(&wt, &wt, 5, &s, 0.0, &WaveletCoeffs::zeros(1, 1)).unwrap();
        for (a, b) in out.data.iter().zip(&wt.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_hand_cases() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, total_steps: usize::MAX, ..Default::default() };
        let mut p = scalar_tree(1.0);
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &scalar_tree(1.0), &mut st).unwrap();
        assert!((p.get_flat(0) - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-9);

        let mut p = scalar_tree(2.0);
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &scalar_tree(0.0), &mut st).unwrap();
        assert_eq!(p.get_flat(0), 2.0);
        assert_eq!(st.m.get_flat(0), 0.0);
        assert_eq!(st.v.get_flat(0), 0.0);
        assert_eq!(st.step, 1);

        let cfg = AdamWConfig { weight_decay: 0.01, ..cfg };
        let mut p = scalar_tree(2.0);
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &scalar_tree(0.0), &mut st).unwrap();
        assert!((p.get_flat(0) - 2.0 * (1.0 - 0.001)).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut p = scalar_tree(1.0);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        match adamw_step(&mut p, &scalar_tree(f64::NAN), &mut st) {
            Err(SalientError::Training { param }) => assert_eq!(param, "p"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = ParamTree::new();
        p.insert("x", Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let f = |p: &ParamTree<f64>| 0.5 * p.get("x").unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let f0 = f(&p);
        let mut st = OptimizerState::new(&p, AdamWConfig { lr: 0.1, total_steps: 100, ..Default::default() });
        for _ in 0..100 {
            let g = p.clone();
            adamw_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(f(&p) <= 0.1 * f0, "{} vs {}", f(&p), f0);
    }

    #[test]
    fn ema_cases() {
        let mut e = scalar_tree(0.0);
        let p = scalar_tree(1.0);
        ema_update(&mut e, &p, 0.9).unwrap();
        ema_update(&mut e, &p, 0.9).unwrap();
        assert!((e.get_flat(0) - 0.19).abs() < 1e-12);
        let mut e = scalar_tree(0.3);
        ema_update(&mut e, &p, 1.0).unwrap();
        assert_eq!(e.get_flat(0), 0.3);
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e.get_flat(0), 1.0);
        assert!(ema_update(&mut e, &p, 1.5).is_err());
    }
}
