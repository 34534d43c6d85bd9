use std::path::Path;
use std::process::{Command, Output};

use salient_core::mask_vae::resample_lesion;
use salient_core::phantom::{load_cohort, write_volume};

const TINY: &str = r#"{
  "data": {"n_subjects": 12, "prevalence": 0.5, "phantom": {"depth": 4, "height": 32, "width": 32}},
  "diffusion": {
    "model": {"levels": 2, "base_channels": 8, "max_channel_mult": 1, "attention_levels": 0, "time_dim": 16},
    "train": {"iterations": 3, "batch_size": 1, "timesteps": 10},
    "sampler": {"steps": 2}
  },
  "vae": {
    "model": {"depth": 4, "height": 16, "width": 16, "latent_dim": 4, "channels": [4]},
    "train": {"iterations": 3, "batch_size": 2},
    "samples": 3
  },
  "analysis": {"ms_ssim_scales": 2},
  "detector": {"blocks": 2, "base_channels": 4, "epochs": 1, "aggregator_iterations": 5},
  "sweep": {
    "seed_sizes": [2], "prevalences": [0.25], "doses": [0, 1], "repetitions": 1,
    "n_test": 8, "train_negatives": 3, "crop": 16
  }
}"#;

fn salient(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salient")).current_dir(dir).args(args).output().expect("spawn salient")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = salient(dir, args);
    assert_eq!(code(&o), 0, "{:?}: {}", args, String::from_utf8_lossy(&o.stderr));
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = salient(tmp.path(), &["bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), r#"{"sweep": {"doses": [1, 2]}}"#).unwrap();
    std::fs::write(tmp.path().join("typo.json"), r#"{"data": {"prevalance": 0.1}}"#).unwrap();
    for cfg in ["bad.json", "typo.json", "missing.json"] {
        let o = salient(tmp.path(), &["--config", cfg, "gen-phantoms", "--out", "c"]);
        assert_eq!(code(&o), 2, "{}", cfg);
        assert!(String::from_utf8_lossy(&o.stderr).contains("config::load"));
    }
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = salient(tmp.path(), &["train-diffusion", "--cohort", "nowhere", "--out", "d"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("phantom_data::load_cohort"));

    std::fs::write(tmp.path().join("tiny.json"), TINY).unwrap();
    ok(tmp.path(), &["--config", "tiny.json", "gen-phantoms", "--out", "c"]);
    let first = std::fs::read_dir(tmp.path().join("c"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "salv"))
        .unwrap();
    let mut bytes = std::fs::read(&first).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(&first, bytes).unwrap();
    let o = salient(tmp.path(), &["--config", "tiny.json", "train-diffusion", "--cohort", "c", "--out", "d"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_passes_and_records_a_run_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = salient(tmp.path(), &["verify", "--out", "v"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{}", stdout);
    assert!(!stdout.contains("[FAIL]"));
    let m = manifest(&tmp.path().join("v"));
    assert_eq!(m["command"], "verify");
    assert!(m["seed"].is_null());
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    for key in ["start", "duration_s", "artifact_paths", "versions"] {
        assert!(m.get(key).is_some(), "{}", key);
    }
}

#[test]
fn seed_flag_is_recorded_and_changes_the_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(dir, &["--config", "tiny.json", "--seed", "7", "gen-phantoms", "--out", "a"]);
    ok(dir, &["--config", "tiny.json", "--seed", "7", "gen-phantoms", "--out", "b"]);
    ok(dir, &["--config", "tiny.json", "gen-phantoms", "--out", "c"]);
    let read = |d: &str| std::fs::read(dir.join(d).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(manifest(&dir.join("a"))["seed"], 7);
    assert_eq!(manifest(&dir.join("a"))["config_hash"], manifest(&dir.join("b"))["config_hash"]);
    assert_ne!(manifest(&dir.join("a"))["config_hash"], manifest(&dir.join("c"))["config_hash"]);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "tiny.json"];
        full.extend_from_slice(args);
        ok(dir, &full);
    };
    run(&["gen-phantoms", "--out", "cohort"]);
    run(&["train-vae", "--cohort", "cohort", "--out", "vae"]);
    run(&["gen-masks", "--vae", "vae/vae.salp", "--out", "gen"]);
    assert_eq!(std::fs::read_dir(dir.join("gen/masks")).unwrap().count(), 3);
    run(&["train-diffusion", "--cohort", "cohort", "--out", "diff"]);

    // Real lesion shapes as the mask source keep placement valid for an
    // undertrained VAE.
    let (_, loaded) = load_cohort(&dir.join("cohort")).unwrap();
    std::fs::create_dir_all(dir.join("masks")).unwrap();
    for (i, s) in loaded.iter().filter(|s| s.entry.label == 1).enumerate() {
        let v = resample_lesion(&s.subject.mask, 4, 16, 16).unwrap();
        write_volume(&dir.join(format!("masks/m{}.salv", i)), &v.to_salv()).unwrap();
    }
    run(&["sample", "--model", "diff/denoiser.salp", "--masks", "masks", "--cohort", "cohort", "--count", "24", "--out", "syn"]);
    run(&["train-detector", "--cohort", "cohort", "--synthetic", "syn/synthetic.salv", "--dose", "1", "--out", "det"]);
    assert!(dir.join("det/detector.salp").exists());
    assert!(dir.join("det/aggregator.salp").exists());

    run(&["sweep", "--synthetic", "syn/synthetic.salv", "--out", "s1"]);
    run(&["sweep", "--synthetic", "syn/synthetic.salv", "--out", "s2"]);
    for f in ["dose_response.csv", "dose_response_summary.csv", "report_meta.json"] {
        let a = std::fs::read(dir.join("s1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.join("s2").join(f)).unwrap(), "{}", f);
    }
    let csv = std::fs::read_to_string(dir.join("s1/dose_response.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(manifest(&dir.join("s1"))["artifact_paths"].as_array().unwrap().len(), 3);

    run(&["analyze", "--cohort", "cohort", "--synthetic", "syn/synthetic.salv", "--out", "an"]);
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("an/analysis.json")).unwrap()).unwrap();
    assert_eq!(a["synthetic"]["slices"], 24);
    assert!(a["frechet_proxy"].is_null());
    assert!(a["ms_ssim_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn sweep_rejects_a_short_pool() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    let o = salient(dir, &["--config", "tiny.json", "train-detector", "--cohort", "c", "--dose", "1", "--out", "d"]);
    assert_ne!(code(&o), 0);
    ok(dir, &["--config", "tiny.json", "gen-phantoms", "--out", "c"]);
    let o = salient(dir, &["--config", "tiny.json", "train-detector", "--cohort", "c", "--dose", "1", "--out", "d"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = salient(dir, &["--config", "tiny.json", "sweep", "--out", "s"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("synthetic positive slices"));
}
