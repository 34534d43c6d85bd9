//! Quick invariant suite behind `salient verify`: one check per stated
//! module invariant, sized to finish in well under a minute on one core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::{band_report, frechet_proxy, ms_ssim, BandReport};
use crate::detection::{
    attention_alignment_loss, attention_target, auprc, auroc, dose_response_sweep, epoch_plan, focal_loss, Detector,
    DetectorConfig, DoseResponseReport, RoiCrop, SweepConfig, SweepData, TrainSlice,
};
use crate::diffusion::{adamw_step, cosine_schedule, forward_sample, reverse_step, AdamWConfig, OptimizerState};
use crate::error::Result;
use crate::mask_vae::{vae_loss, LatentCode, MaskVae, MaskVolume, Provenance, VaeConfig, VaeLossWeights};
use crate::model::{
    draw_dropout, fsa_modulate, guidance_combine, loss_and_grads, make_sample, normal_like, sample_loss, total_loss,
    Denoiser, DenoiserConfig, DiffusionExample, Dropout, DropoutConfig, LossWeights, FSA_GAINS,
};
use crate::morph::{Mask, Mask3};
use crate::nn::gradcheck::{check, pick_coordinates};
use crate::params::ParamTree;
use crate::phantom::{
    gen_subject, generate_cohort, pair_synthetic, read_volume_bytes, volume_bytes, CohortConfig, PhantomConfig,
    SalvVolume, TvrBand,
};
use crate::tensor::Tensor;
use crate::wavelet::{boundary_weight_map, dwt2, idwt2, Slice, WaveletCoeffs, WeightMapParams};

#[derive(Clone, Debug)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Outcome = Result<(bool, String)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_slice(r: &mut ChaCha8Rng, n: usize) -> Slice<f64> {
    Slice { h: n, w: n, data: (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect() }
}

fn square_mask(n: usize, y0: usize, x0: usize, side: usize) -> Mask {
    let mut m = Mask::zeros(n, n);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(y, x, true);
        }
    }
    m
}

/// Run every check in module order.
pub fn run_all() -> Vec<Check> {
    let suite: Vec<(&'static str, &'static str, fn() -> Outcome)> = vec![
        ("wavelet_core", "perfect reconstruction", reconstruction),
        ("wavelet_core", "energy preservation", parseval),
        ("wavelet_core", "linearity", linearity),
        ("wavelet_core", "weight map", weight_map),
        ("diffusion_engine", "schedule monotonicity", schedule),
        ("diffusion_engine", "forward marginal", forward_marginal),
        ("diffusion_engine", "reverse consistency", reverse_consistency),
        ("diffusion_engine", "optimizer descent", optimizer_descent),
        ("salient_model", "FSA identity", fsa_identity),
        ("salient_model", "guidance telescoping", guidance),
        ("salient_model", "loss nonnegativity and zero", loss_zero),
        ("salient_model", "gradient fidelity", denoiser_gradients),
        ("salient_model", "condition-dropout coverage", dropout_coverage),
        ("mask_vae", "free-bits floor and nonnegativity", free_bits),
        ("mask_vae", "reparameterization", reparameterization),
        ("mask_vae", "gradient fidelity", vae_gradients),
        ("phantom_data", "exact prevalence and determinism", prevalence),
        ("phantom_data", "TVR consistency", tvr),
        ("phantom_data", "SALV corruption detection", salv_corruption),
        ("detection_harness", "metric oracles", metrics),
        ("detection_harness", "focal monotonicity", focal),
        ("detection_harness", "epoch composition", epochs),
        ("detection_harness", "attention bounds and alignment", attention),
        ("detection_harness", "gradient fidelity", detector_gradients),
        ("detection_harness", "sweep determinism", sweep_determinism),
        ("analysis_cli", "MS-SSIM properties", ssim),
        ("analysis_cli", "Frechet proxy properties", frechet),
        ("analysis_cli", "CSV round trips", csv_round_trips),
        ("analysis_cli", "SALP corruption detection", salp_corruption),
    ];
    suite
        .into_iter()
        .map(|(module, name, f)| {
            let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {}", e)));
            Check { module, name, pass, detail }
        })
        .collect()
}

fn reconstruction() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = random_slice(&mut r, 64);
        let y = idwt2(&dwt2(&x)?)?;
        worst = x.data.iter().zip(&y.data).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok((worst < 1e-6, format!("max error {:.1e}", worst)))
}

fn parseval() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = random_slice(&mut r, 32);
        let e = x.energy();
        worst = worst.max((dwt2(&x)?.energy() - e).abs() / e);
    }
    Ok((worst < 1e-6, format!("max relative error {:.1e}", worst)))
}

fn linearity() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (x, y) = (random_slice(&mut r, 16), random_slice(&mut r, 16));
        let (a, b) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let z = Slice { h: 16, w: 16, data: x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect() };
        let (cx, cy, cz) = (dwt2(&x)?, dwt2(&y)?, dwt2(&z)?);
        for i in 0..cz.data.len() {
            worst = worst.max((cz.data[i] - (a * cx.data[i] + b * cy.data[i])).abs());
        }
    }
    Ok((worst < 1e-6, format!("max error {:.1e}", worst)))
}

fn weight_map() -> Outcome {
    let p = WeightMapParams::default();
    let m = square_mask(16, 5, 4, 5);
    let wm = boundary_weight_map::<f64>(&m, &p)?;
    let boundary = m.gradient().dilate_n(p.dilation);
    let n = 16 * 16;
    let mut ok = wm.weights.iter().all(|&w| w >= 0.0);
    for b in 0..4 {
        for i in 0..n {
            if boundary.data[i] == 0 {
                ok &= wm.weights[b * n + i] == p.base[b];
            }
        }
    }
    Ok((ok, "nonnegative, base weight off the boundary band".into()))
}

fn schedule() -> Outcome {
    let s = cosine_schedule(200, 0.008)?;
    let strict = (1..=200).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1));
    let ok = strict && s.alpha_bar(0) == 1.0 && s.alpha_bar(200) >= 1e-5;
    Ok((ok, format!("alpha_bar(T) = {:.2e}", s.alpha_bar(200))))
}

fn forward_marginal() -> Outcome {
    let sched = cosine_schedule(200, 0.008)?;
    let mut r = rng(4);
    let draws = 10_000;
    let (mut worst_z, mut worst_var) = (0.0f64, 0.0f64);
    for t in [20, 120] {
        let w0 = WaveletCoeffs::new(2, 2, (0..16).map(|_| normal(&mut r)).collect::<Vec<f64>>())?;
        let ab = sched.alpha_bar(t);
        let var = 1.0 - ab;
        let n = w0.data.len();
        let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..draws {
            let wt = forward_sample(&w0, t, &normal_like(&mut r, 2, 2), &sched)?;
            for i in 0..n {
                let d = wt.data[i] - ab.sqrt() * w0.data[i];
                sum[i] += d;
                sq[i] += d * d;
            }
        }
        let total = (draws * n) as f64;
        let z = sum.iter().sum::<f64>() / total / (var / total).sqrt();
        let pooled = (0..n).map(|i| (sq[i] - sum[i] * sum[i] / draws as f64) / (draws - 1) as f64).sum::<f64>() / n as f64;
        worst_z = worst_z.max(z.abs());
        worst_var = worst_var.max((pooled - var).abs() / var);
    }
    Ok((worst_z < 3.0 && worst_var < 0.05, format!("max |z| {:.2}, max variance error {:.2}%", worst_z, 100.0 * worst_var)))
}

fn reverse_consistency() -> Outcome {
    let sched = cosine_schedule(200, 0.008)?;
    let mut r = rng(5);
    let w0 = WaveletCoeffs::new(4, 4, (0..64).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>())?;
    let zero = WaveletCoeffs::zeros(4, 4);
    let mut worst = 0.0f64;
    for t in [1, 50, 137, 200] {
        let mut w = forward_sample(&w0, t, &normal_like(&mut r, 4, 4), &sched)?;
        for k in (1..=t).rev() {
            w = reverse_step(&w, &w0, k, &sched, 0.0, &zero)?;
        }
        worst = w.data.iter().zip(&w0.data).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok((worst < 1e-4, format!("max error {:.1e}", worst)))
}

fn optimizer_descent() -> Outcome {
    let mut p = ParamTree::<f64>::new();
    p.insert("p", Tensor::from_vec(&[8], (0..8).map(|i| i as f64 - 3.5).collect())?);
    let f = |p: &ParamTree<f64>| 0.5 * p.get("p").map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).unwrap_or(0.0);
    let start = f(&p);
    let mut opt = OptimizerState::new(&p, AdamWConfig { lr: 0.1, weight_decay: 0.0, total_steps: 100, ..AdamWConfig::default() });
    for _ in 0..100 {
        let g = p.clone();
        adamw_step(&mut p, &g, &mut opt)?;
    }
    let end = f(&p);
    Ok((end <= 0.1 * start, format!("objective {:.3} -> {:.2e}", start, end)))
}

fn fsa_identity() -> Outcome {
    let mut r = rng(6);
    let w = WaveletCoeffs::new(8, 8, (0..256).map(|_| normal(&mut r)).collect::<Vec<f64>>())?;
    let m = square_mask(8, 2, 2, 3);
    let at_init = fsa_modulate(&w, &m, &[0.0; 4])? == w;
    let empty = fsa_modulate(&w, &Mask::zeros(8, 8), &[0.7, -0.3, 1.2, 0.4])? == w;
    Ok((at_init && empty, "gamma = 0 and empty masks leave coefficients unchanged".into()))
}

fn guidance() -> Outcome {
    let mut r = rng(7);
    let mut bad = 0;
    for _ in 0..200 {
        let mut c = || WaveletCoeffs::new(3, 3, (0..36).map(|_| r.random_range(-5.0..5.0)).collect::<Vec<f64>>());
        let (a, b, d) = (c()?, c()?, c()?);
        let (sm, sn) = (r.random_range(0.0..4.0), r.random_range(0.0..4.0));
        bad += usize::from(guidance_combine(&a, &a, &a, sm, sn)? != a);
        bad += usize::from(guidance_combine(&a, &b, &d, 0.0, 0.0)? != a);
        bad += usize::from(guidance_combine(&a, &b, &d, 1.0, 0.0)? != b);
    }
    Ok((bad == 0, format!("{} violations", bad)))
}

fn loss_zero() -> Outcome {
    let mut r = rng(8);
    let m = square_mask(16, 4, 4, 6);
    let w = LossWeights::default();
    let mut ok = true;
    for _ in 0..20 {
        let x = dwt2(&random_slice(&mut r, 16))?;
        let y = dwt2(&random_slice(&mut r, 16))?;
        let t = sample_loss(&y, &x, &m, &w)?;
        ok &= t.wavelet >= 0.0 && t.ll >= 0.0 && t.hf >= 0.0 && t.aux >= 0.0;
        ok &= sample_loss(&x, &x, &m, &w)?.total() == 0.0;
    }
    Ok((ok, "every term >= 0; total 0 at the target".into()))
}

fn tiny_denoiser() -> Result<Denoiser> {
    Denoiser::new(DenoiserConfig { levels: 3, base_channels: 8, attention_levels: 1, time_dim: 8, ..DenoiserConfig::default() })
}

fn denoiser_gradients() -> Outcome {
    let den = tiny_denoiser()?;
    let mut params = den.init_params::<f64>(9);
    if let Some(g) = params.get_mut(FSA_GAINS) {
        g.data_mut().copy_from_slice(&[0.3, -0.2, 0.1, 0.4]);
    }
    let sched = cosine_schedule(200, 0.008)?;
    let mut r = rng(10);
    let batch = [Dropout::Keep, Dropout::Neighbors]
        .into_iter()
        .map(|d| {
            let ex = DiffusionExample {
                slice: random_slice(&mut r, 16),
                mask: square_mask(16, 4, 5, 5),
                neighbors: vec![random_slice(&mut r, 16), random_slice(&mut r, 16)],
            };
            let t = r.random_range(1..=200);
            make_sample(&ex, t, &normal_like(&mut r, 8, 8), d, &sched, false)
        })
        .collect::<Result<Vec<_>>>()?;
    let w = LossWeights::default();
    let (_, grads) = loss_and_grads(&den, &batch, &params, &w)?;
    let coords = pick_coordinates(&params, 50, 11, &[FSA_GAINS]);
    let res = check(&params, &grads, &coords, 1e-6, |p| total_loss(&den, &batch, p, &w))?;
    Ok((res.max_rel_error < 1e-3, format!("{} coordinates, max relative error {:.1e}", coords.len(), res.max_rel_error)))
}

fn dropout_coverage() -> Outcome {
    let cfg = DropoutConfig::default();
    let mut r = rng(12);
    let n = 20_000;
    let (mut all, mut nei) = (0usize, 0usize);
    for _ in 0..n {
        match draw_dropout(&mut r, &cfg) {
            Dropout::All => all += 1,
            Dropout::Neighbors => nei += 1,
            Dropout::Keep => {}
        }
    }
    let (fa, fn_) = (all as f64 / n as f64, nei as f64 / n as f64);
    let ok = (fa - cfg.p_drop_all).abs() <= 0.03 && (fn_ - cfg.p_drop_neighbors).abs() <= 0.03;
    Ok((ok, format!("drop_all {:.3}, drop_neighbors {:.3}", fa, fn_)))
}

fn blob_volume(d: usize, h: usize, w: usize, r: usize) -> MaskVolume {
    let mut m = Mask3::zeros(d, h, w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (dz, dy, dx) = (z.abs_diff(d / 2), y.abs_diff(h / 2), x.abs_diff(w / 2));
                m.set(z, y, x, dz * dz + dy * dy + dx * dx <= r * r);
            }
        }
    }
    MaskVolume { mask: m, provenance: Provenance::Real }
}

fn free_bits() -> Outcome {
    let mut r = rng(13);
    let vol = blob_volume(4, 8, 8, 2);
    let w = VaeLossWeights::default();
    let d = 16;
    let mut ok = true;
    let mut min_kl = f64::INFINITY;
    for _ in 0..50 {
        let code = LatentCode::new(
            (0..d).map(|_| 0.01 * normal(&mut r)).collect::<Vec<f64>>(),
            (0..d).map(|_| 0.01 * normal(&mut r)).collect(),
            (0..d).map(|_| normal(&mut r)).collect(),
        );
        let pred: Vec<f64> = (0..vol.mask.data.len()).map(|_| r.random_range(0.0..1.0)).collect();
        let t = vae_loss(&pred, &vol.mask, &code, &w)?;
        min_kl = min_kl.min(t.kl);
        ok &= t.kl >= d as f64 * w.free_bits - 1e-12 && t.dice >= 0.0 && t.bce >= 0.0 && t.total(&w) >= 0.0;
    }
    Ok((ok, format!("min KL term {:.3} (floor {:.2})", min_kl, d as f64 * w.free_bits)))
}

fn reparameterization() -> Outcome {
    let mut r = rng(14);
    let mu = vec![0.5, -1.0, 2.0];
    let lv = vec![0.0, -1.0, 0.7];
    let base = LatentCode::new(mu.clone(), lv.clone(), vec![0.0; 3]);
    let n = 10_000;
    let (mut s, mut s2) = (vec![0.0; 3], vec![0.0; 3]);
    for _ in 0..n {
        let c = base.reparameterize(&mut r);
        for i in 0..3 {
            s[i] += c.sample[i];
            s2[i] += c.sample[i] * c.sample[i];
        }
    }
    let mut worst = 0.0f64;
    for i in 0..3 {
        let m = s[i] / n as f64;
        let sd = (s2[i] / n as f64 - m * m).sqrt();
        let want_sd = (0.5 * lv[i]).exp();
        // mean error measured against the spread, so a zero mean is fine
        worst = worst.max((m - mu[i]).abs() / want_sd.max(mu[i].abs())).max((sd - want_sd).abs() / want_sd);
    }
    Ok((worst < 0.03, format!("max relative error {:.2}%", 100.0 * worst)))
}

fn vae_gradients() -> Outcome {
    let vae = MaskVae::new(VaeConfig { depth: 4, height: 8, width: 8, latent_dim: 4, channels: vec![2, 3] })?;
    let params = vae.init_params::<f64>(15);
    let vol = blob_volume(4, 8, 8, 2);
    let xi = vec![0.2, -0.4, 1.1, -0.7];
    let w = VaeLossWeights { free_bits: 0.0, ..VaeLossWeights::default() };
    let (_, grads) = vae.loss_and_grads(&vol, &xi, &params, &w)?;
    let coords = pick_coordinates(&params, 50, 16, &[]);
    let res = check(&params, &grads, &coords, 1e-6, |p| Ok(vae.loss_and_grads(&vol, &xi, p, &w)?.0.total(&w)))?;
    Ok((res.max_rel_error < 1e-3, format!("{} coordinates, max relative error {:.1e}", coords.len(), res.max_rel_error)))
}

fn small_cohort(n: usize, prevalence: f64, seed: u64) -> CohortConfig {
    CohortConfig { n_subjects: n, prevalence, seed, ..CohortConfig::default() }
}

fn prevalence() -> Outcome {
    let mut ok = true;
    for (n, p) in [(10, 0.3), (7, 0.5), (12, 0.1)] {
        let cfg = small_cohort(n, p, 17);
        let (m, subjects) = generate_cohort(&cfg)?;
        let positives = subjects.iter().filter(|s| s.label == 1).count();
        ok &= positives == (n as f64 * p).round() as usize && m.n_positive() == positives;
    }
    let cfg = small_cohort(6, 0.5, 18);
    let (a, sa) = generate_cohort(&cfg)?;
    let (b, sb) = generate_cohort(&cfg)?;
    ok &= a == b && sa == sb;
    Ok((ok, "positive counts exact; regeneration identical".into()))
}

fn tvr() -> Outcome {
    let (m, subjects) = generate_cohort(&small_cohort(8, 0.5, 19))?;
    let mut worst = 0.0f64;
    for (e, s) in m.subjects.iter().zip(&subjects) {
        let frac = s.mask.count() as f64 / (s.depth * s.height * s.width) as f64;
        worst = worst.max((frac - e.tvr).abs()).max((frac - s.tvr).abs());
    }
    Ok((worst <= 1e-9, format!("max deviation {:.1e}", worst)))
}

/// Altered copies under three XOR patterns per byte that a reader accepts.
fn escapes(bytes: &[u8], accepted: impl Fn(&[u8]) -> bool) -> (usize, usize) {
    let mut buf = bytes.to_vec();
    let (mut tried, mut escaped) = (0, 0);
    for i in 0..buf.len() {
        for x in [0x01u8, 0x80, 0xff] {
            buf[i] ^= x;
            tried += 1;
            escaped += usize::from(accepted(&buf));
            buf[i] ^= x;
        }
    }
    (tried, escaped)
}

fn salv_corruption() -> Outcome {
    let mut r = rng(20);
    let v = SalvVolume {
        depth: 2,
        height: 4,
        width: 4,
        intensity: Some((0..32).map(|_| r.random_range(-1.0..1.0)).collect()),
        mask: Some(Mask3 { d: 2, h: 4, w: 4, data: (0..32).map(|_| r.random_range(0..2)).collect() }),
    };
    let bytes = volume_bytes(&v)?;
    let rt = read_volume_bytes(&bytes)? == v;
    let (tried, escaped) = escapes(&bytes, |b| read_volume_bytes(b).is_ok());
    Ok((rt && escaped == 0, format!("{} corruptions, {} undetected", tried, escaped)))
}

fn pr_brute(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut th = scores.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let npos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut prev, mut ap) = (0u64, 0.0);
    for &t in &th {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as u64;
        let pp = scores.iter().filter(|&&s| s >= t).count() as u64;
        ap += (tp - prev) as f64 / npos * (tp as f64 / pp as f64);
        prev = tp;
    }
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    (ap, wins / pairs)
}

fn metrics() -> Outcome {
    let mut r = rng(21);
    let (mut n_ok, mut trials) = (0, 0);
    while trials < 500 {
        let n = r.random_range(2..=8);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64 / 4.0).collect();
        trials += 1;
        let (ap, roc) = pr_brute(&scores, &labels);
        n_ok += usize::from(auprc(&scores, &labels)? == ap && auroc(&scores, &labels)? == roc);
    }
    let worked = (auprc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])? - 5.0 / 6.0).abs() < 1e-12
        && auroc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])? == 0.75;
    Ok((n_ok == trials && worked, format!("{}/{} instances match enumeration", n_ok, trials)))
}

fn focal() -> Outcome {
    let mut prev = f64::INFINITY;
    let mut ok = true;
    for i in 1..1000 {
        let l = focal_loss(i as f64 / 1000.0, 1, 0.25, 2.0);
        ok &= l < prev;
        prev = l;
    }
    Ok((ok, "strictly decreasing on a 999-point grid".into()))
}

fn epochs() -> Outcome {
    let mut r = rng(22);
    let mut ok = true;
    for (n_real, dose) in [(20, 0), (20, 2), (7, 4), (13, 1)] {
        let p = epoch_plan(n_real, dose, 100, 50, &mut r)?;
        ok &= p.real.len() == n_real && p.synthetic.len() == dose * n_real && p.negatives.len() == n_real * (1 + dose);
    }
    ok &= epoch_plan(20, 4, 10, 50, &mut r).is_err();
    Ok((ok, "counts follow real, dose x real, real x (1 + dose)".into()))
}

fn tiny_detector_config() -> DetectorConfig {
    DetectorConfig { base_channels: 4, epochs: 1, batch_size: 4, aggregator_hidden: 4, aggregator_iterations: 20, ..DetectorConfig::default() }
}

fn toy_slice(r: &mut ChaCha8Rng, positive: bool) -> TrainSlice {
    let mut s = Slice::<f32>::zeros(16, 16);
    for v in s.data.iter_mut() {
        *v = r.random_range(-0.2..0.2);
    }
    let mut m = Mask::zeros(16, 16);
    if positive {
        let (y0, x0) = (r.random_range(2..10), r.random_range(2..10));
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                s.data[y * 16 + x] += 0.8;
                m.set(y, x, true);
            }
        }
    }
    TrainSlice { slice: s, mask: Some(m), label: u8::from(positive) }
}

fn attention() -> Outcome {
    let det = Detector::new(tiny_detector_config())?;
    let p = det.init_params::<f32>(23);
    let mut r = rng(24);
    let mut ok = true;
    for i in 0..10 {
        let s = toy_slice(&mut r, i % 2 == 0);
        let (_, att) = det.mga_forward(&s.slice, &p)?;
        ok &= att.iter().all(|a| (0.0..=1.0).contains(a));
        let target = attention_target(s.mask.as_ref().expect("mask"))?;
        let exact: Vec<f64> = target.data.iter().map(|&v| v as f64).collect();
        ok &= attention_alignment_loss(&exact, &target, 0.5)? == 0.0;
        ok &= attention_alignment_loss(&att, &target, 0.5)? > 0.0;
    }
    Ok((ok, "attention in [0, 1]; alignment zero only at the resized mask".into()))
}

fn detector_gradients() -> Outcome {
    let det = Detector::new(tiny_detector_config())?;
    let p = det.init_params::<f64>(25);
    let mut r = rng(26);
    let batch = vec![toy_slice(&mut r, true), toy_slice(&mut r, false)];
    let (_, grads) = det.loss_and_grads(&batch, &p)?;
    let coords = pick_coordinates(&p, 50, 27, &[]);
    let res = check(&p, &grads, &coords, 1e-6, |q| det.loss(&batch, q).map(|l| l.total()))?;
    Ok((res.max_rel_error < 1e-3, format!("{} coordinates, max relative error {:.1e}", coords.len(), res.max_rel_error)))
}

fn sweep_determinism() -> Outcome {
    let sweep = SweepConfig {
        seed_sizes: vec![2],
        prevalences: vec![0.25],
        doses: vec![0, 1],
        repetitions: 1,
        n_test: 8,
        train_negatives: 3,
        ..SweepConfig::default()
    };
    let base = CohortConfig::default();
    let (tr, te) = sweep.cohorts(&base)?;
    let (train, test) = (generate_cohort(&tr)?.1, generate_cohort(&te)?.1);
    let crop = RoiCrop::around(base.phantom.placement(), 32, base.phantom.height, base.phantom.width)?;
    // real lesion slices stand in for a generated pool
    let pool = train
        .iter()
        .filter(|s| s.label == 1)
        .flat_map(|s| s.lesion_slices().into_iter().map(move |z| pair_synthetic(s.slice(z), &s.mask_slice(z))))
        .collect::<Result<Vec<_>>>()?;
    let data = SweepData::new(&train, &test, &pool, &crop)?;
    let det = tiny_detector_config();
    let a = dose_response_sweep(&sweep, &det, &data)?;
    let b = dose_response_sweep(&sweep, &det, &data)?;
    let same = a.to_csv() == b.to_csv() && a.summary_csv() == b.summary_csv();
    Ok((same && a.meta.missing.is_empty(), format!("{} rows, identical bytes on rerun", a.rows.len())))
}

fn phantom_slices(n: usize) -> Result<Vec<Slice<f32>>> {
    (0..n)
        .map(|i| gen_subject(100 + (i / 12) as u64, i % 24 < 12, TvrBand::Large, 0.35, &PhantomConfig::default()).map(|s| s.slice(i % 12)))
        .collect()
}

fn ssim() -> Outcome {
    let slices = phantom_slices(3)?;
    let mut r = rng(28);
    let mut ok = true;
    for s in &slices {
        ok &= (ms_ssim(s, s, 3)? - 1.0).abs() <= 1e-9;
        let mut prev = f64::INFINITY;
        for sigma in [0.05, 0.1, 0.2] {
            let n = Slice { h: s.h, w: s.w, data: s.data.iter().map(|&v| (v as f64 + sigma * normal(&mut r)) as f32).collect() };
            let ab = ms_ssim(s, &n, 3)?;
            ok &= (ab - ms_ssim(&n, s, 3)?).abs() <= 1e-9 && ab < prev;
            prev = ab;
        }
    }
    Ok((ok, "identity, symmetry, monotone degradation on 3 slices".into()))
}

fn frechet() -> Outcome {
    let a = phantom_slices(96)?;
    let mut r = rng(29);
    let b: Vec<Slice<f32>> = a
        .iter()
        .map(|s| Slice { h: s.h, w: s.w, data: s.data.iter().map(|&v| (v as f64 + 0.1 * normal(&mut r)) as f32).collect() })
        .collect();
    let same = frechet_proxy(&a, &a)?;
    let ab = frechet_proxy(&a, &b)?;
    let ba = frechet_proxy(&b, &a)?;
    let ok = same.abs() <= 1e-6 && ab >= 0.0 && (ab - ba).abs() <= 1e-6 && ab > same;
    Ok((ok, format!("self {:.1e}, cross {:.4} / {:.4}", same, ab, ba)))
}

fn csv_round_trips() -> Outcome {
    let slices = phantom_slices(4)?;
    let masks: Vec<Mask> = (0..4).map(|i| square_mask(64, 10 + i, 20, 6)).collect();
    let report = band_report(&slices, Some(&masks))?;
    let csv = report.to_csv();
    let band_ok = BandReport::from_csv(&csv)?.to_csv() == csv;
    let mut r = rng(30);
    let rows = (0..3)
        .flat_map(|rep| {
            [0usize, 1, 2].map(|dose| crate::detection::DoseRow {
                seed_size: 16,
                prevalence: 0.05,
                dose,
                rep,
                auprc: Some(r.random_range(0.0..1.0)),
                auroc: Some(r.random_range(0.0..1.0)),
                delta_auprc: None,
                is_optimum: false,
            })
        })
        .collect();
    let meta = crate::detection::ReportMeta {
        format_version: crate::detection::REPORT_VERSION,
        aggregator: crate::detection::AggregatorMode::Gated,
        checkpoint: "final".into(),
        mask_guided: true,
        missing: Vec::new(),
    };
    let dose = DoseResponseReport::assemble(rows, meta);
    let dcsv = dose.to_csv();
    let back = DoseResponseReport { rows: DoseResponseReport::rows_from_csv(&dcsv)?, meta: dose.meta.clone() };
    let dose_ok = back.to_csv() == dcsv;
    Ok((band_ok && dose_ok, "band report and dose-response CSV reproduce their bytes".into()))
}

fn salp_corruption() -> Outcome {
    let mut p = ParamTree::<f32>::new();
    p.insert("a.w", Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.5, -0.25])?);
    p.insert("b", Tensor::from_vec(&[1], vec![7.0])?);
    let bytes = p.to_bytes()?;
    let rt = ParamTree::<f32>::from_bytes(&bytes)? == p;
    let (tried, escaped) = escapes(&bytes, |b| ParamTree::<f32>::from_bytes(b).is_ok());
    Ok((rt && escaped == 0, format!("{} corruptions, {} undetected", tried, escaped)))
}
