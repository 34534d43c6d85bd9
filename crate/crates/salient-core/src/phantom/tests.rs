use super::*;
use crate::wavelet::Slice;

fn small_cfg(n: usize, prevalence: f64, seed: u64) -> CohortConfig {
    CohortConfig {
        n_subjects: n,
        prevalence,
        seed,
        phantom: PhantomConfig { depth: 4, ..PhantomConfig::default() },
        ..CohortConfig::default()
    }
}

#[test]
fn negative_subject_is_empty() {
    let s = gen_subject(3, false, TvrBand::Middle, 0.35, &PhantomConfig::default()).unwrap();
    assert_eq!(s.label, 0);
    assert_eq!(s.tvr, 0.0);
    assert_eq!(s.mask.count(), 0);
    assert!(s.volume.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn subject_is_deterministic() {
    let cfg = PhantomConfig::default();
    let a = gen_subject(11, true, TvrBand::Small, 0.35, &cfg).unwrap();
    let b = gen_subject(11, true, TvrBand::Small, 0.35, &cfg).unwrap();
    assert_eq!(a.volume.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.volume.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.mask, b.mask);
}

#[test]
fn tvr_lands_in_band_and_matches_mask() {
    let cfg = PhantomConfig::default();
    for band in TvrBand::ALL {
        for seed in 0..4 {
            let s = gen_subject(seed, true, band, 0.35, &cfg).unwrap();
            let (lo, hi) = band.range();
            let recomputed = s.mask.count() as f64 / cfg.voxels() as f64;
            assert!((s.tvr - recomputed).abs() <= 1e-9);
            assert!(s.tvr >= lo && s.tvr <= hi, "{:?} seed {} tvr {}", band, seed, s.tvr);
            assert_eq!(s.label, 1);
        }
    }
}

#[test]
fn lesion_stays_in_placement_box() {
    let cfg = PhantomConfig::default();
    let (y0, y1, x0, x1) = cfg.placement();
    let s = gen_subject(5, true, TvrBand::Large, 0.5, &cfg).unwrap();
    for z in 0..cfg.depth {
        let m = s.mask_slice(z);
        for y in 0..m.h {
            for x in 0..m.w {
                if m.data[y * m.w + x] == 1 {
                    assert!((y0..y1).contains(&y) && (x0..x1).contains(&x));
                }
            }
        }
    }
}

#[test]
fn contrast_out_of_range_is_rejected() {
    let cfg = PhantomConfig::default();
    assert!(matches!(gen_subject(0, true, TvrBand::Small, 0.05, &cfg), Err(crate::SalientError::Validation(_))));
    assert!(matches!(gen_subject(0, true, TvrBand::Small, 0.9, &cfg), Err(crate::SalientError::Validation(_))));
}

#[test]
fn cohort_prevalence_is_exact() {
    let (m, _) = generate_cohort(&small_cfg(200, 0.05, 1)).unwrap();
    assert_eq!(m.n_positive(), 10);
    let (m, _) = generate_cohort(&small_cfg(100, 0.01, 2)).unwrap();
    assert_eq!(m.n_positive(), 1);
    let mut ids: Vec<_> = m.subjects.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 100);
}

#[test]
fn zero_positive_cohort_is_rejected() {
    assert!(matches!(generate_cohort(&small_cfg(20, 0.01, 0)), Err(crate::SalientError::Validation(_))));
    assert!(generate_cohort(&small_cfg(20, 0.0, 0)).is_err());
    assert!(generate_cohort(&small_cfg(20, 1.0, 0)).is_err());
}

#[test]
fn cohort_files_are_byte_identical_across_runs() {
    let cfg = small_cfg(20, 0.1, 9);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen_cohort(&cfg, a.path()).unwrap();
    let m = gen_cohort(&cfg, b.path()).unwrap();
    let mut names = vec!["manifest.json".to_string()];
    names.extend(m.subjects.iter().map(|s| s.path.clone()));
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{}", n);
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    for key in ["prevalence", "seed", "config_hash", "subjects"] {
        assert!(json.get(key).is_some(), "{}", key);
    }
    let entry = json["subjects"][0].as_object().unwrap();
    let mut keys: Vec<_> = entry.keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["id", "label", "path", "split", "tvr"]);

    let (loaded_m, loaded) = load_cohort(a.path()).unwrap();
    assert_eq!(loaded_m, m);
    assert_eq!(loaded.len(), 20);
    assert_eq!(loaded.iter().filter(|s| s.subject.label == 1).count(), 2);
}

#[test]
fn different_seeds_give_different_cohorts() {
    let (_, a) = generate_cohort(&small_cfg(10, 0.1, 1)).unwrap();
    let (_, b) = generate_cohort(&small_cfg(10, 0.1, 2)).unwrap();
    assert_ne!(a[0].volume, b[0].volume);
}

fn sample_volume() -> SalvVolume {
    let s = gen_subject(7, true, TvrBand::Middle, 0.35, &PhantomConfig { depth: 3, ..PhantomConfig::default() }).unwrap();
    SalvVolume { depth: s.depth, height: s.height, width: s.width, intensity: Some(s.volume), mask: Some(s.mask) }
}

#[test]
fn salv_round_trip_is_bit_exact() {
    let v = sample_volume();
    let bytes = volume_bytes(&v).unwrap();
    assert_eq!(&bytes[..4], b"SALV");
    assert_eq!(bytes[8], FLAG_INTENSITY | FLAG_MASK);
    let back = read_volume_bytes(&bytes).unwrap();
    assert_eq!(back, v);
    assert_eq!(volume_bytes(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.salv");
    write_volume(&p, &v).unwrap();
    assert_eq!(read_volume(&p).unwrap(), v);
}

#[test]
fn salv_truncation_and_corruption_are_detected() {
    let v = SalvVolume { depth: 2, height: 4, width: 4, ..sample_volume() };
    let v = SalvVolume {
        intensity: Some((0..32).map(|i| i as f32 / 40.0).collect()),
        mask: Some(crate::morph::Mask3 { d: 2, h: 4, w: 4, data: (0..32).map(|i| (i % 3 == 0) as u8).collect() }),
        ..v
    };
    let bytes = volume_bytes(&v).unwrap();
    for cut in [0, 5, 21, bytes.len() - 1] {
        assert!(read_volume_bytes(&bytes[..cut]).is_err());
    }
    for i in 0..bytes.len() {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut b = bytes.clone();
            b[i] ^= flip;
            assert!(read_volume_bytes(&b).is_err(), "byte {} flip {:#x}", i, flip);
        }
    }
}

#[test]
fn salv_errors_name_the_field() {
    let bytes = volume_bytes(&sample_volume()).unwrap();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(read_volume_bytes(&b), Err(crate::SalientError::Format { field: "magic", .. })));
    let mut b = bytes.clone();
    b[4] = 2;
    assert!(matches!(read_volume_bytes(&b), Err(crate::SalientError::Format { field: "version", .. })));
    let mut b = bytes.clone();
    let n = b.len();
    b[n - 10] ^= 1;
    assert!(matches!(read_volume_bytes(&b), Err(crate::SalientError::Format { field: "crc32", .. })));
}

#[test]
fn mask_only_volume_round_trips() {
    let v = sample_volume();
    let m = SalvVolume { intensity: None, ..v };
    let bytes = volume_bytes(&m).unwrap();
    assert_eq!(bytes[8], FLAG_MASK);
    let back = read_volume_bytes(&bytes).unwrap();
    assert!(back.intensity.is_none());
    assert_eq!(back.mask, m.mask);
}

#[test]
fn pairing_returns_mask_verbatim() {
    let s = gen_subject(2, true, TvrBand::Large, 0.35, &PhantomConfig::default()).unwrap();
    let z = s.lesion_slices()[0];
    let mask = s.mask_slice(z);
    let p = pair_synthetic(s.slice(z), &mask).unwrap();
    assert_eq!(p.mask, mask);
    assert_eq!(p.label, 1);
    let empty = crate::morph::Mask::zeros(64, 64);
    assert_eq!(pair_synthetic(s.slice(z), &empty).unwrap().label, 0);
    assert!(pair_synthetic(Slice::<f32>::zeros(32, 32), &mask).is_err());
}
