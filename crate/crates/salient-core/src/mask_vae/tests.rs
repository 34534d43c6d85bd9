use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::morph::{Mask, Mask3};
use crate::nn::gradcheck;
use crate::nn::graph::Graph;
use crate::params::ParamVars;
use crate::phantom::{gen_subject, PhantomConfig, TvrBand};
use crate::tensor::Tensor;

fn tiny() -> MaskVae {
    MaskVae::new(VaeConfig { depth: 4, height: 8, width: 8, latent_dim: 4, channels: vec![2, 3] }).unwrap()
}

fn blob(d: usize, h: usize, w: usize, c: (usize, usize, usize), r: usize) -> MaskVolume {
    let mut m = Mask3::zeros(d, h, w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = z.abs_diff(c.0);
                let dy = y.abs_diff(c.1);
                let dx = x.abs_diff(c.2);
                m.set(z, y, x, dz * dz + dy * dy + dx * dx <= r * r);
            }
        }
    }
    MaskVolume { mask: m, provenance: Provenance::Real }
}

#[test]
fn loss_examples() {
    let w = VaeLossWeights::default();
    let target = blob(4, 8, 8, (2, 4, 4), 2).mask;
    let pred: Vec<f64> = target.data.iter().map(|&v| v as f64).collect();
    let zero = LatentCode::new(vec![0.0; 32], vec![0.0; 32], vec![0.0; 32]);
    let t = vae_loss(&pred, &target, &zero, &w).unwrap();
    assert!(t.dice.abs() < 1e-9);
    assert!(t.bce < 1e-3);
    assert!((t.kl - 32.0 * 0.05).abs() < 1e-12);

    let one = LatentCode::new(vec![1.0], vec![0.0], vec![0.0]);
    assert_eq!(one.kl_per_dim(), vec![0.5]);

    let mut a = Mask3::zeros(1, 1, 6);
    a.data = vec![1, 1, 1, 1, 0, 0];
    let b: Vec<f64> = vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let t = vae_loss(&b, &a, &one, &w).unwrap();
    assert!((t.dice - 0.5).abs() < 1e-6);
}

#[test]
fn free_bits_floor_and_nonnegativity() {
    let w = VaeLossWeights::default();
    let target = blob(4, 8, 8, (1, 3, 3), 1).mask;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..20 {
        let code = LatentCode::new(vec![0.01 * k as f64; 8], vec![-0.02 * k as f64; 8], vec![0.0; 8]).reparameterize(&mut rng);
        let pred: Vec<f64> = (0..target.data.len()).map(|i| ((i * 7 + k) % 11) as f64 / 11.0).collect();
        let t = vae_loss(&pred, &target, &code, &w).unwrap();
        assert!(t.kl >= 8.0 * w.free_bits - 1e-12);
        assert!(t.dice >= 0.0 && t.bce >= 0.0 && t.total(&w) >= 0.0);
    }
}

#[test]
fn graph_loss_matches_plain_loss() {
    let vae = tiny();
    let params = vae.init_params::<f64>(3);
    let vol = blob(4, 8, 8, (2, 3, 4), 2);
    let xi = vec![0.3, -1.0, 0.5, 2.0];
    let (terms, _) = vae.loss_and_grads(&vol, &xi, &params, &VaeLossWeights::default()).unwrap();
    let l = terms.total(&VaeLossWeights::default());
    let code = vae.encode(&vol, &params).unwrap();
    let code = LatentCode::new(code.mu, code.log_var, xi);
    let pred = vae.decode(&code.sample, &params).unwrap();
    let t = vae_loss(&pred, &vol.mask, &code, &VaeLossWeights::default()).unwrap();
    assert!((l - t.total(&VaeLossWeights::default())).abs() < 1e-10, "{} vs {:?}", l, t);
}

#[test]
fn encoder_mu_norm_gradient_matches_finite_differences() {
    let vae = tiny();
    let params = vae.init_params::<f64>(5);
    let vol = blob(4, 8, 8, (2, 4, 3), 2);
    let mu_norm = |p: &crate::params::ParamTree<f64>| -> (f64, Option<crate::params::ParamTree<f64>>) {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, p, true);
        let x = g.constant(vae.input(&vol.mask).unwrap());
        let (mu, _) = vae.encode_graph(&mut g, &pv, x);
        let s = g.square(mu);
        let s = g.sum(s);
        let v = g.value(s).item();
        let grads = g.backward(s);
        (v, Some(pv.grads(p, &grads)))
    };
    let (_, grads) = mu_norm(&params);
    let grads = grads.unwrap();
    let coords = gradcheck::pick_coordinates(&params, 40, 2, &[]);
    let coords: Vec<usize> = coords.into_iter().filter(|&i| params.coordinate(i).0.starts_with("enc")).collect();
    assert!(!coords.is_empty());
    let res = gradcheck::check(&params, &grads, &coords, 1e-6, |p| Ok(mu_norm(p).0)).unwrap();
    assert!(res.max_rel_error < 1e-3, "{}", res.max_rel_error);
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let vae = tiny();
    let params = vae.init_params::<f64>(8);
    let vol = blob(4, 8, 8, (2, 4, 4), 2);
    let xi = vec![0.2, -0.4, 1.1, -0.7];
    let w = VaeLossWeights { free_bits: 0.0, ..VaeLossWeights::default() };
    let (_, grads) = vae.loss_and_grads(&vol, &xi, &params, &w).unwrap();
    let coords = gradcheck::pick_coordinates(&params, 40, 4, &[]);
    let res =
        gradcheck::check(&params, &grads, &coords, 1e-6, |p| Ok(vae.loss_and_grads(&vol, &xi, p, &w)?.0.total(&w))).unwrap();
    assert!(res.max_rel_error < 1e-3, "{}", res.max_rel_error);
}

#[test]
fn encode_decode_contracts() {
    let vae = tiny();
    let params = vae.init_params::<f32>(1);
    let vol = blob(4, 8, 8, (2, 4, 4), 2);
    let a = vae.encode(&vol, &params).unwrap();
    let b = vae.encode(&vol, &params).unwrap();
    assert_eq!(a, b);
    assert!(a.log_var.iter().all(|v| v.is_finite() && v.abs() <= 10.0));
    let p = vae.decode(&a.mu, &params).unwrap();
    assert_eq!(p.len(), 4 * 8 * 8);
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(p, vae.decode(&a.mu, &params).unwrap());
    let m = vae.binarize(&p);
    assert!(m.data.iter().all(|&v| v <= 1));
    assert!(matches!(vae.decode(&[0.0f32; 3], &params), Err(crate::SalientError::Validation(_))));
    let wrong = MaskVolume { mask: Mask3::zeros(4, 8, 4), provenance: Provenance::Real };
    assert!(matches!(vae.encode(&wrong, &params), Err(crate::SalientError::Dimension(_))));
}

#[test]
fn log_var_is_clamped() {
    let vae = tiny();
    let mut params = vae.init_params::<f64>(1);
    params.get_mut("enc.logvar.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 50.0);
    let code = vae.encode(&blob(4, 8, 8, (2, 4, 4), 2), &params).unwrap();
    assert!(code.log_var.iter().all(|&v| v == 10.0));
}

#[test]
fn reparameterization_moments() {
    let base = LatentCode::<f64>::new(vec![0.7, -1.5], vec![-0.4, 0.9], vec![0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let mut s = [[0.0f64; 2]; 2];
    for _ in 0..n {
        let c = base.reparameterize(&mut rng);
        for d in 0..2 {
            assert!((c.sample[d] - (c.mu[d] + (0.5 * c.log_var[d]).exp() * c.xi[d])).abs() < 1e-15);
            s[d][0] += c.sample[d];
            s[d][1] += c.sample[d] * c.sample[d];
        }
    }
    for d in 0..2 {
        let mean = s[d][0] / n as f64;
        let std = (s[d][1] / n as f64 - mean * mean).sqrt();
        let sd = (0.5 * base.log_var[d]).exp();
        assert!((mean - base.mu[d]).abs() < 0.03 * base.mu[d].abs().max(sd), "mean {}", mean);
        assert!((std - sd).abs() < 0.03 * sd, "std {}", std);
    }
}

#[test]
fn sampling_is_seeded_and_binary() {
    let vae = tiny();
    let mut params = vae.init_params::<f32>(2);
    // bias the output toward foreground so prior samples are nonempty
    params.get_mut("dec1.b").unwrap().data_mut()[0] = 1.0;
    let a = vae.sample_masks(3, 9, &params).unwrap();
    let b = vae.sample_masks(3, 9, &params).unwrap();
    assert_eq!(a, b);
    for m in &a {
        assert_eq!((m.mask.d, m.mask.h, m.mask.w), (4, 8, 8));
        assert!(m.mask.count() > 0);
        assert_eq!(m.provenance, Provenance::VaeSampled);
    }
    params.get_mut("dec1.b").unwrap().data_mut()[0] = -100.0;
    assert!(matches!(vae.sample_masks(1, 9, &params), Err(crate::SalientError::Generation(_))));
}

#[test]
fn slicing_examples() {
    let mut m = Mask3::zeros(3, 8, 8);
    m.set(1, 4, 4, true);
    let vol = MaskVolume { mask: m, provenance: Provenance::Real };
    let place = (4, 12, 6, 14);
    let out = slice_conditioning_masks(&vol, (16, 16), place, 3).unwrap();
    assert_eq!(out.len(), 1);
    let (z, s) = &out[0];
    assert_eq!(*z, 1);
    assert_eq!(s.count(), 4);
    let pos: Vec<(usize, usize)> =
        (0..16).flat_map(|y| (0..16).map(move |x| (y, x))).filter(|&(y, x)| s.get(y, x)).collect();
    let (y, x) = pos[0];
    assert_eq!(pos, vec![(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)]);
    assert!(y >= 4 && y + 2 <= 12 && x >= 6 && x + 2 <= 14);
    assert_eq!(out, slice_conditioning_masks(&vol, (16, 16), place, 3).unwrap());

    let big = blob(3, 8, 8, (1, 4, 4), 3);
    assert!(matches!(slice_conditioning_masks(&big, (16, 16), place, 0), Err(crate::SalientError::Placement(_))));
    assert!(slice_conditioning_masks(&vol, (15, 16), place, 0).is_err());
}

#[test]
fn sliced_masks_keep_volume_shape() {
    let vol = blob(4, 8, 8, (2, 4, 4), 1);
    let out = slice_conditioning_masks(&vol, (16, 16), (0, 16, 0, 16), 5).unwrap();
    let counts: Vec<usize> = out.iter().map(|(_, s)| s.count()).collect();
    let expect: Vec<usize> = (0..4).map(|z| vol.mask.slice(z).count() * 4).filter(|&c| c > 0).collect();
    assert_eq!(counts, expect);
}

#[test]
fn resampled_phantom_lesions_fit_placement() {
    let cfg = PhantomConfig::default();
    let s = gen_subject(4, true, TvrBand::Large, 0.35, &cfg).unwrap();
    let vol = resample_lesion(&s.mask, 16, 32, 32).unwrap();
    assert!(vol.mask.count() > 0);
    for z in 0..16 {
        assert!(!vol.mask.slice(z).is_empty());
    }
    let out = slice_conditioning_masks(&vol, (64, 64), cfg.placement(), 1).unwrap();
    assert_eq!(out.len(), 16);
    let salv = crate::phantom::volume_bytes(&vol.to_salv()).unwrap();
    assert_eq!(salv[8], crate::phantom::FLAG_MASK);
    let back = MaskVolume::from_salv(crate::phantom::read_volume_bytes(&salv).unwrap(), Provenance::Real).unwrap();
    assert_eq!(back, vol);
    assert!(resample_lesion(&Mask3::zeros(4, 64, 64), 16, 32, 32).is_err());
    let _ = Mask::zeros(1, 1);
    let _ = Tensor::<f32>::zeros(&[1]);
}

#[test]
fn short_training_improves_reconstruction() {
    let vae = MaskVae::new(VaeConfig { depth: 4, height: 8, width: 8, latent_dim: 4, channels: vec![4, 8] }).unwrap();
    let vols: Vec<MaskVolume> =
        (0..6).map(|i| blob(4, 8, 8, (1 + i % 2, 3 + i % 3, 3 + i / 3), 1 + i % 2)).collect();
    let init = vae.init_params::<f32>(0);
    let dice = |p: &crate::params::ParamTree<f32>| -> f64 {
        vols.iter()
            .map(|v| {
                let r = vae.reconstruct(v, p).unwrap();
                let inter = r.data.iter().zip(&v.mask.data).filter(|(a, b)| **a == 1 && **b == 1).count();
                2.0 * inter as f64 / (r.count() + v.mask.count()).max(1) as f64
            })
            .sum::<f64>()
            / vols.len() as f64
    };
    let before = dice(&init);
    let cfg = VaeTrainConfig { iterations: 300, batch_size: 4, ..VaeTrainConfig::default() };
    let t = train_vae(&vae, &vols, init, &cfg).unwrap();
    assert!(t.min_kl.iter().all(|&k| k >= 4.0 * cfg.weights.free_bits - 1e-9));
    let after = dice(&t.params);
    assert!(after > before + 0.2 && after > 0.6, "{} -> {}", before, after);
}
