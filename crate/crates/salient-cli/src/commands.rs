use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use salient_core::analysis::{band_report, frechet_proxy, ms_ssim, FEATURE_DIM};
use salient_core::config::RunConfig;
use salient_core::detection::{
    dose_response_sweep, fit_scorer, synthetic_needed, Aggregator, RoiCrop, SubjectSlices, SweepData, TrainSlice,
};
use salient_core::diffusion::{cosine_schedule, NoiseSchedule};
use salient_core::mask_vae::{train_vae as fit_vae, MaskVae, MaskVolume, Provenance};
use salient_core::model::{train_denoiser, Denoiser};
use salient_core::params::ParamTree;
use salient_core::phantom::{derive_seed, gen_cohort, generate_cohort, load_cohort, read_volume, write_volume, PhantomSubject};
use salient_core::pipeline::{lesion_examples, vae_volumes};
use salient_core::synth::{pairs_from_salv, pairs_to_salv, synthesize_from_masks, synthesize_pairs, Generator};
use salient_core::verify::run_all;
use salient_core::wavelet::Slice;
use salient_core::{Mask, SalientError};

use crate::{at, CmdResult, Failure, Outcome};

fn done(artifacts: Vec<PathBuf>) -> CmdResult<Outcome> {
    Ok(Outcome { artifacts, ok: true })
}

fn config_error(op: &'static str, msg: impl Into<String>) -> Failure {
    Failure { op, err: SalientError::Config(msg.into()) }
}

fn write_text(path: PathBuf, text: &str, op: &'static str) -> CmdResult<PathBuf> {
    std::fs::write(&path, text).map_err(at(op))?;
    Ok(path)
}

fn losses_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{}", i, l).unwrap();
    }
    out
}

fn subjects(dir: &Path) -> CmdResult<Vec<PhantomSubject>> {
    let (_, loaded) = load_cohort(dir).map_err(at("phantom_data::load_cohort"))?;
    Ok(loaded.into_iter().map(|l| l.subject).collect())
}

fn negatives(subjects: &[PhantomSubject]) -> Vec<PhantomSubject> {
    subjects.iter().filter(|s| s.label == 0).cloned().collect()
}

fn schedule(cfg: &RunConfig) -> CmdResult<NoiseSchedule> {
    cosine_schedule(cfg.diffusion.train.timesteps, cfg.diffusion.train.schedule_offset)
        .map_err(at("diffusion_engine::cosine_schedule"))
}

fn load_params<T: salient_core::Scalar>(path: &Path, op: &'static str) -> CmdResult<ParamTree<T>> {
    ParamTree::load(path).map_err(at(op))
}

pub fn gen_phantoms(cfg: &RunConfig, out: &Path) -> CmdResult<Outcome> {
    let manifest = gen_cohort(&cfg.data, out).map_err(at("phantom_data::gen_cohort"))?;
    let mut artifacts = vec![out.join("manifest.json")];
    artifacts.extend(manifest.subjects.iter().map(|s| out.join(&s.path)));
    done(artifacts)
}

pub fn train_vae(cfg: &RunConfig, cohort: &Path, out: &Path) -> CmdResult<Outcome> {
    let subjects = subjects(cohort)?;
    let vae = MaskVae::new(cfg.vae.model.clone()).map_err(at("mask_vae::new"))?;
    let volumes = vae_volumes(&subjects, &vae.config).map_err(at("mask_vae::resample_lesion"))?;
    let init = vae.init_params::<f32>(derive_seed(cfg.vae.train.seed, 0));
    let trained = fit_vae(&vae, &volumes, init, &cfg.vae.train).map_err(at("mask_vae::train_vae"))?;
    let params = out.join("vae.salp");
    trained.ema.save(&params).map_err(at("mask_vae::save_params"))?;
    let losses = write_text(out.join("vae_losses.csv"), &losses_csv(&trained.losses), "mask_vae::write_losses")?;
    done(vec![params, losses])
}

pub fn gen_masks(cfg: &RunConfig, vae_path: &Path, out: &Path) -> CmdResult<Outcome> {
    let vae = MaskVae::new(cfg.vae.model.clone()).map_err(at("mask_vae::new"))?;
    let params = load_params::<f32>(vae_path, "mask_vae::load_params")?;
    let volumes = vae
        .sample_masks(cfg.vae.samples, derive_seed(cfg.vae.train.seed, 1), &params)
        .map_err(at("mask_vae::sample_masks"))?;
    let dir = out.join("masks");
    std::fs::create_dir_all(&dir).map_err(at("mask_vae::write_masks"))?;
    let mut artifacts = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let path = dir.join(format!("mask_{:04}.salv", i));
        write_volume(&path, &v.to_salv()).map_err(at("mask_vae::write_masks"))?;
        artifacts.push(path);
    }
    done(artifacts)
}

pub fn train_diffusion(cfg: &RunConfig, cohort: &Path, out: &Path) -> CmdResult<Outcome> {
    let subjects = subjects(cohort)?;
    let den = Denoiser::new(cfg.diffusion.model.clone()).map_err(at("salient_model::new"))?;
    let examples =
        lesion_examples(&subjects, &den.config.neighbor_offsets).map_err(at("salient_model::lesion_examples"))?;
    let init = den.init_params::<f32>(derive_seed(cfg.diffusion.train.seed, 0));
    let trained = train_denoiser(&den, &examples, init, &cfg.diffusion.train, &cfg.diffusion.loss)
        .map_err(at("salient_model::train_denoiser"))?;
    let params = out.join("denoiser.salp");
    trained.ema.save(&params).map_err(at("salient_model::save_params"))?;
    let losses =
        write_text(out.join("diffusion_losses.csv"), &losses_csv(&trained.report.losses), "salient_model::write_losses")?;
    done(vec![params, losses])
}

fn mask_volumes(dir: &Path) -> CmdResult<Vec<MaskVolume>> {
    let op = "mask_vae::read_masks";
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(at(op))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(at(op))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "salv"));
    paths.sort();
    if paths.is_empty() {
        return Err(config_error(op, format!("no .salv mask volumes in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let v = read_volume(p).map_err(at(op))?;
            MaskVolume::from_salv(v, Provenance::VaeSampled).map_err(at(op))
        })
        .collect()
}

pub fn sample(cfg: &RunConfig, model: &Path, masks: &Path, cohort: &Path, count: usize, out: &Path) -> CmdResult<Outcome> {
    if count == 0 {
        return Err(config_error("analysis_cli::sample", "--count must be positive"));
    }
    let den = Denoiser::new(cfg.diffusion.model.clone()).map_err(at("salient_model::new"))?;
    let params = load_params::<f32>(model, "salient_model::load_params")?;
    let volumes = mask_volumes(masks)?;
    let hosts = negatives(&subjects(cohort)?);
    let sched = schedule(cfg)?;
    let pairs = synthesize_from_masks(
        &den,
        &params,
        &sched,
        &cfg.diffusion.sampler,
        &volumes,
        &hosts,
        cfg.data.phantom.placement(),
        count,
        derive_seed(cfg.diffusion.train.seed, 2),
    )
    .map_err(at("salient_model::synthesize"))?;
    let path = out.join("synthetic.salv");
    let stack = pairs_to_salv(&pairs).map_err(at("phantom_data::write_synthetic"))?;
    write_volume(&path, &stack).map_err(at("phantom_data::write_synthetic"))?;
    done(vec![path])
}

fn crop(cfg: &RunConfig) -> CmdResult<RoiCrop> {
    let p = &cfg.data.phantom;
    RoiCrop::around(p.placement(), cfg.sweep.crop, p.height, p.width).map_err(at("detection_harness::roi_crop"))
}

fn synthetic_slices(path: &Path, crop: &RoiCrop) -> CmdResult<Vec<TrainSlice>> {
    let op = "detection_harness::read_synthetic";
    let stack = read_volume(path).map_err(at(op))?;
    let pairs = pairs_from_salv(&stack).map_err(at(op))?;
    pairs
        .iter()
        .filter(|p| p.label == 1)
        .map(|p| {
            Ok(TrainSlice { slice: crop.slice(&p.slice).map_err(at(op))?, mask: Some(crop.mask(&p.mask).map_err(at(op))?), label: 1 })
        })
        .collect()
}

pub fn train_detector(
    cfg: &RunConfig,
    cohort: &Path,
    synthetic: Option<&Path>,
    dose: usize,
    out: &Path,
) -> CmdResult<Outcome> {
    let crop = crop(cfg)?;
    let subjects: Vec<SubjectSlices> = subjects(cohort)?
        .iter()
        .map(|s| SubjectSlices::from_phantom(s, &crop))
        .collect::<salient_core::Result<_>>()
        .map_err(at("detection_harness::subject_slices"))?;
    let synthetic = match synthetic {
        Some(p) => synthetic_slices(p, &crop)?,
        None if dose > 0 => return Err(config_error("detection_harness::train_detector", "--dose > 0 needs --synthetic")),
        None => Vec::new(),
    };
    let positives: Vec<&SubjectSlices> = subjects.iter().filter(|s| s.label == 1).collect();
    let negatives: Vec<&SubjectSlices> = subjects.iter().filter(|s| s.label == 0).collect();
    let scorer = fit_scorer(&cfg.detector, &positives, &negatives, &synthetic, dose)
        .map_err(at("detection_harness::train_detector"))?;
    let det = out.join("detector.salp");
    scorer.params.save(&det).map_err(at("detection_harness::save_params"))?;
    let mut artifacts = vec![det];
    if let Aggregator::Gated(agg) = &scorer.aggregator {
        let path = out.join("aggregator.salp");
        agg.params.save(&path).map_err(at("detection_harness::save_params"))?;
        artifacts.push(path);
    }
    done(artifacts)
}

pub fn sweep(cfg: &RunConfig, synthetic: Option<&Path>, generator: Option<(&Path, &Path)>, out: &Path) -> CmdResult<Outcome> {
    let op = "detection_harness::dose_response_sweep";
    let (train_cfg, test_cfg) = cfg.sweep.cohorts(&cfg.data).map_err(at(op))?;
    let train = generate_cohort(&train_cfg).map_err(at("phantom_data::generate_cohort"))?.1;
    let test = generate_cohort(&test_cfg).map_err(at("phantom_data::generate_cohort"))?.1;
    let crop = crop(cfg)?;
    let mut data = SweepData::new(&train, &test, &[], &crop).map_err(at(op))?;
    let need = synthetic_needed(&cfg.sweep, &data);
    if let Some(path) = synthetic {
        data.synthetic = synthetic_slices(path, &crop)?;
    } else if let Some((model, vae_path)) = generator {
        let den = Denoiser::new(cfg.diffusion.model.clone()).map_err(at("salient_model::new"))?;
        let params = load_params::<f32>(model, "salient_model::load_params")?;
        let vae = MaskVae::new(cfg.vae.model.clone()).map_err(at("mask_vae::new"))?;
        let vae_params = load_params::<f32>(vae_path, "mask_vae::load_params")?;
        let sched = schedule(cfg)?;
        let gen = Generator {
            denoiser: &den,
            params: &params,
            schedule: &sched,
            sampler: cfg.diffusion.sampler.clone(),
            vae: &vae,
            vae_params: &vae_params,
        };
        let pairs = synthesize_pairs(&gen, &negatives(&train), cfg.data.phantom.placement(), need, derive_seed(cfg.sweep.seed, 1_000))
            .map_err(at("salient_model::synthesize"))?;
        data = SweepData::new(&train, &test, &pairs, &crop).map_err(at(op))?;
    }
    if data.synthetic.len() < need {
        return Err(config_error(
            op,
            format!("the dose grid needs {} synthetic positive slices, {} available", need, data.synthetic.len()),
        ));
    }
    let report = dose_response_sweep(&cfg.sweep, &cfg.detector, &data).map_err(at(op))?;
    let meta = serde_json::to_string_pretty(&report.meta).map_err(at("detection_harness::write_report"))? + "\n";
    let artifacts = vec![
        write_text(out.join("dose_response.csv"), &report.to_csv(), "detection_harness::write_report")?,
        write_text(out.join("dose_response_summary.csv"), &report.summary_csv(), "detection_harness::write_report")?,
        write_text(out.join("report_meta.json"), &meta, "detection_harness::write_report")?,
    ];
    done(artifacts)
}

fn lesion_slices(subjects: &[PhantomSubject]) -> (Vec<Slice<f32>>, Vec<Mask>) {
    let mut slices = Vec::new();
    let mut masks = Vec::new();
    for s in subjects.iter().filter(|s| s.label == 1) {
        for z in 0..s.depth {
            let m = s.mask.slice(z);
            if m.count() > 0 {
                slices.push(s.slice(z));
                masks.push(m);
            }
        }
    }
    (slices, masks)
}

pub fn analyze(cfg: &RunConfig, cohort: &Path, synthetic: &Path, out: &Path) -> CmdResult<Outcome> {
    let (real, real_masks) = lesion_slices(&subjects(cohort)?);
    let stack = read_volume(synthetic).map_err(at("analysis_cli::read_synthetic"))?;
    let pairs = pairs_from_salv(&stack).map_err(at("analysis_cli::read_synthetic"))?;
    let syn: Vec<Slice<f32>> = pairs.iter().map(|p| p.slice.clone()).collect();
    let syn_masks: Vec<Mask> = pairs.iter().map(|p| p.mask.clone()).collect();

    let real_report = band_report(&real, Some(&real_masks)).map_err(at("analysis_cli::band_report"))?;
    let syn_report = band_report(&syn, Some(&syn_masks)).map_err(at("analysis_cli::band_report"))?;
    // The proxy's covariance needs more slices than feature dimensions.
    let frechet = if syn.len() > FEATURE_DIM && real.len() > FEATURE_DIM {
        Some(frechet_proxy(&syn, &real).map_err(at("analysis_cli::frechet_proxy"))?)
    } else {
        None
    };
    let n = syn.len().min(real.len());
    let mut ssim = 0.0;
    for i in 0..n {
        ssim += ms_ssim(&syn[i], &real[i], cfg.analysis.ms_ssim_scales).map_err(at("analysis_cli::ms_ssim"))?;
    }
    let summary = |r: &salient_core::analysis::BandReport| {
        let s = r.summary();
        serde_json::json!({
            "slices": r.rows.len(),
            "ll_std": s[0],
            "detail_var": [s[1], s[2], s[3]],
        })
    };
    let doc = serde_json::json!({
        "real": summary(&real_report),
        "synthetic": summary(&syn_report),
        "frechet_proxy": frechet,
        "frechet_min_slices": FEATURE_DIM + 1,
        "ms_ssim_pairs": n,
        "ms_ssim_mean": if n > 0 { Some(ssim / n as f64) } else { None },
    });
    let text = serde_json::to_string_pretty(&doc).map_err(at("analysis_cli::write_report"))? + "\n";
    done(vec![
        write_text(out.join("bands_real.csv"), &real_report.to_csv(), "analysis_cli::write_report")?,
        write_text(out.join("bands_synthetic.csv"), &syn_report.to_csv(), "analysis_cli::write_report")?,
        write_text(out.join("analysis.json"), &text, "analysis_cli::write_report")?,
    ])
}

pub fn verify() -> CmdResult<Outcome> {
    let checks = run_all();
    for c in &checks {
        println!("[{}] {}::{}: {}", if c.pass { "PASS" } else { "FAIL" }, c.module, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(Outcome { artifacts: Vec::new(), ok: failed == 0 })
}
