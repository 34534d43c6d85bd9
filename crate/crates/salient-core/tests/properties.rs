use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use salient_core::analysis::{band_report, ms_ssim, BandReport};
use salient_core::detection::{
    auprc, auroc, epoch_plan, focal_loss, noisy_or, AggregatorMode, DoseResponseReport, DoseRow, ReportMeta,
    REPORT_VERSION,
};
use salient_core::diffusion::cosine_schedule;
use salient_core::model::guidance_combine;
use salient_core::phantom::{generate_cohort, read_volume_bytes, volume_bytes, CohortConfig, SalvVolume};
use salient_core::wavelet::{Slice, WaveletCoeffs};
use salient_core::{boundary_weight_map, dwt2, idwt2, Mask, Mask3, ParamTree, Tensor, WeightMapParams};

fn even(max_half: usize) -> impl Strategy<Value = usize> {
    (1..=max_half).prop_map(|n| 2 * n)
}

fn slice_f64() -> impl Strategy<Value = Slice<f64>> {
    (even(8), even(8)).prop_flat_map(|(h, w)| {
        prop::collection::vec(-4.0f64..4.0, h * w).prop_map(move |data| Slice { h, w, data })
    })
}

fn energy(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Step-wise AP by enumerating every threshold directly.
fn brute_auprc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut th: Vec<f64> = scores.to_vec();
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in th {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
        let r = tp / pos;
        ap += (r - prev_r) * tp / (tp + fp);
        prev_r = r;
    }
    ap
}

fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn dose_row() -> impl Strategy<Value = DoseRow> {
    let metric = prop::option::of(0.0f64..1.0);
    (1usize..100, 1u32..99, 0usize..11, 0usize..5, metric.clone(), metric.clone(), prop::option::of(-1.0f64..1.0), any::<bool>())
        .prop_map(|(seed_size, p, dose, rep, auprc, auroc, delta_auprc, is_optimum)| DoseRow {
            seed_size,
            prevalence: p as f64 / 100.0,
            dose,
            rep,
            auprc,
            auroc,
            delta_auprc,
            is_optimum,
        })
}

fn meta() -> ReportMeta {
    ReportMeta {
        format_version: REPORT_VERSION,
        aggregator: AggregatorMode::Gated,
        checkpoint: "final".into(),
        mask_guided: true,
        missing: Vec::new(),
    }
}

proptest! {
    #[test]
    fn haar_round_trip_and_energy(s in slice_f64()) {
        let c = dwt2(&s).unwrap();
        prop_assert_eq!((c.h, c.w), (s.h / 2, s.w / 2));
        let back = idwt2(&c).unwrap();
        for (a, b) in back.data.iter().zip(&s.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let (e0, e1) = (energy(&s.data), energy(&c.data));
        prop_assert!((e0 - e1).abs() <= 1e-10 * e0.max(1.0));
    }

    #[test]
    fn haar_is_linear(a in slice_f64(), alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Slice { h: a.h, w: a.w, data: (0..a.data.len()).map(|_| rng.random_range(-4.0..4.0)).collect() };
        let mix = Slice { h: a.h, w: a.w, data: a.data.iter().zip(&b.data).map(|(x, y)| alpha * x + y).collect() };
        let (ca, cb, cm) = (dwt2(&a).unwrap(), dwt2(&b).unwrap(), dwt2(&mix).unwrap());
        for i in 0..cm.data.len() {
            prop_assert!((cm.data[i] - (alpha * ca.data[i] + cb.data[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn odd_sizes_are_rejected(h in 1usize..9, w in 1usize..9) {
        prop_assume!(h % 2 == 1 || w % 2 == 1);
        let s = Slice { h, w, data: vec![0.0f64; h * w] };
        prop_assert!(dwt2(&s).is_err());
    }

    #[test]
    fn weight_map_is_base_off_the_boundary(bits in prop::collection::vec(any::<bool>(), 64), beta in 0.0f64..5.0, dil in 0usize..3) {
        let mut m = Mask::zeros(8, 8);
        for (i, &b) in bits.iter().enumerate() {
            m.set(i / 8, i % 8, b);
        }
        let p = WeightMapParams { base: [1.0, 0.5, 0.5, 0.7], beta, dilation: dil };
        let wm = boundary_weight_map::<f64>(&m, &p).unwrap();
        let boundary = m.gradient().dilate_n(dil);
        for b in 0..4 {
            for i in 0..64 {
                let w = wm.weights[b * 64 + i];
                prop_assert!(w >= 0.0 && w.is_finite());
                if boundary.data[i] == 0 {
                    prop_assert_eq!(w, p.base[b]);
                }
            }
        }
    }

    #[test]
    fn schedule_starts_at_one_and_decreases(steps in 1usize..=250, offset in 0.001f64..0.05) {
        let s = cosine_schedule(steps, offset).unwrap();
        prop_assert_eq!(s.alpha_bar[0], 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            prop_assert!(s.alpha_bar[t] >= 1e-5 && s.alpha_bar[t] < 1.0);
        }
    }

    #[test]
    fn guidance_endpoints_are_exact(seed in any::<u64>(), s_nei in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || WaveletCoeffs::<f64> { h: 2, w: 2, data: (0..16).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let (null, masked, full) = (draw(), draw(), draw());
        prop_assert_eq!(guidance_combine(&null, &masked, &full, 0.0, 0.0).unwrap(), null.clone());
        prop_assert_eq!(guidance_combine(&null, &masked, &full, 1.0, 0.0).unwrap(), masked.clone());
        let g = guidance_combine(&null, &masked, &full, 1.0, s_nei).unwrap();
        for i in 0..16 {
            let want = masked.data[i] + s_nei * (full.data[i] - masked.data[i]);
            prop_assert!((g.data[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_match_brute_force(n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
        for code in 0u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((code >> i) & 1) as u8).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            if pos == 0 || pos == n {
                prop_assert!(auprc(&scores, &labels).is_err());
                continue;
            }
            prop_assert!((auprc(&scores, &labels).unwrap() - brute_auprc(&scores, &labels)).abs() <= 1e-12);
            prop_assert!((auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs() <= 1e-12);
        }
    }

    #[test]
    fn focal_loss_is_monotone(p in 0.0f64..1.0, q in 0.0f64..1.0, alpha in 0.0f64..1.0, gamma in 0.0f64..5.0) {
        let (lo, hi) = if p < q { (p, q) } else { (q, p) };
        prop_assert!(focal_loss(lo, 1, alpha, gamma) >= focal_loss(hi, 1, alpha, gamma));
        prop_assert!(focal_loss(lo, 0, alpha, gamma) <= focal_loss(hi, 0, alpha, gamma));
        prop_assert!(focal_loss(p, 1, alpha, gamma) >= 0.0 && focal_loss(p, 0, alpha, gamma) >= 0.0);
    }

    #[test]
    fn noisy_or_bounds(probs in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let v = noisy_or(&probs).unwrap();
        let max = probs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(v >= max - 1e-15 && v <= 1.0);
    }

    #[test]
    fn epoch_plan_counts(n_real in 1usize..40, dose in 0usize..6, extra in 0usize..10, seed in any::<u64>()) {
        let n_syn = dose * n_real + extra;
        let n_neg = n_real * (1 + dose) + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = epoch_plan(n_real, dose, n_syn, n_neg, &mut rng).unwrap();
        prop_assert_eq!(plan.real.len(), n_real);
        prop_assert_eq!(plan.synthetic.len(), dose * n_real);
        prop_assert_eq!(plan.negatives.len(), n_real * (1 + dose));
        prop_assert!(plan.synthetic.iter().all(|&i| i < n_syn));
        if dose > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert!(epoch_plan(n_real, dose, dose * n_real - 1, n_neg, &mut rng).is_err());
        }
    }

    #[test]
    fn ms_ssim_of_identical_slices_is_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Slice::<f32> { h: 64, w: 64, data: (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect() };
        prop_assert!((ms_ssim(&s, &s, 3).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn dose_report_csv_round_trips(rows in prop::collection::vec(dose_row(), 0..20)) {
        let report = DoseResponseReport { rows, meta: meta() };
        let csv = report.to_csv();
        prop_assert!(csv.ends_with('\n') && !csv.contains('\r'));
        let rebuilt = DoseResponseReport { rows: DoseResponseReport::rows_from_csv(&csv).unwrap(), meta: meta() };
        prop_assert_eq!(rebuilt.to_csv(), csv);
    }

    #[test]
    fn band_report_csv_round_trips(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slices: Vec<Slice<f32>> = (0..n)
            .map(|_| Slice { h: 16, w: 16, data: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect() })
            .collect();
        let masks: Vec<Mask> = (0..n)
            .map(|_| {
                let mut m = Mask::zeros(16, 16);
                for _ in 0..rng.random_range(0..40) {
                    m.set(rng.random_range(0..16), rng.random_range(0..16), true);
                }
                m
            })
            .collect();
        let r = band_report(&slices, Some(&masks)).unwrap();
        let csv = r.to_csv();
        prop_assert_eq!(BandReport::from_csv(&csv).unwrap().to_csv(), csv);
    }

    #[test]
    fn salv_detects_any_single_byte_corruption(seed in any::<u64>(), pick in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, w) = (2, 4, 4);
        let mut mask = Mask3::zeros(d, h, w);
        mask.set(rng.random_range(0..d), rng.random_range(0..h), rng.random_range(0..w), true);
        let v = SalvVolume {
            depth: d,
            height: h,
            width: w,
            intensity: Some((0..d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()),
            mask: Some(mask),
        };
        let mut bytes = volume_bytes(&v).unwrap();
        prop_assert_eq!(&read_volume_bytes(&bytes).unwrap(), &v);
        let i = pick.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(read_volume_bytes(&bytes).is_err(), "flip at byte {}", i);
    }

    #[test]
    fn salp_detects_any_single_byte_corruption(seed in any::<u64>(), pick in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamTree::<f32>::new();
        p.insert("a.w", Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        p.insert("b", Tensor::from_vec(&[1], vec![rng.random_range(-1.0..1.0)]).unwrap());
        let mut bytes = p.to_bytes().unwrap();
        prop_assert_eq!(&ParamTree::<f32>::from_bytes(&bytes).unwrap(), &p);
        let i = pick.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(ParamTree::<f32>::from_bytes(&bytes).is_err(), "flip at byte {}", i);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn cohort_prevalence_is_exact(n in 4usize..24, pct in 10u32..90, seed in any::<u64>()) {
        let mut cfg = CohortConfig { n_subjects: n, prevalence: pct as f64 / 100.0, seed, ..CohortConfig::default() };
        cfg.phantom.depth = 3;
        prop_assume!(cfg.validate().is_ok());
        let (manifest, subjects) = generate_cohort(&cfg).unwrap();
        let want = (n as f64 * cfg.prevalence).round() as usize;
        prop_assert_eq!(manifest.n_positive(), want);
        prop_assert_eq!(subjects.iter().filter(|s| s.label == 1).count(), want);
        let mut ids: Vec<&str> = manifest.subjects.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        for s in &subjects {
            prop_assert_eq!(s.label == 1, s.mask.count() > 0);
        }
        let again = generate_cohort(&cfg).unwrap().0;
        prop_assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&manifest).unwrap());
    }
}
