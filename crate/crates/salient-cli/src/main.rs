use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use salient_core::config::RunConfig;
use salient_core::SalientError;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "salient", version, about = "Mask-conditioned wavelet diffusion and long-tail detection experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; replaces every stage seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom cohort.
    GenPhantoms,
    /// Train the mask VAE on the lesion masks of a cohort.
    TrainVae {
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Draw lesion mask volumes from a trained VAE.
    GenMasks {
        #[arg(long)]
        vae: PathBuf,
    },
    /// Train the denoiser on the lesion slices of a cohort.
    TrainDiffusion {
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Synthesize paired slices from mask volumes on negative hosts.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train the detector and aggregator on a cohort.
    TrainDetector {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        dose: usize,
    },
    /// Run the dose-response sweep.
    Sweep {
        #[arg(long, conflicts_with_all = ["model", "vae"])]
        synthetic: Option<PathBuf>,
        #[arg(long, requires = "vae")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        vae: Option<PathBuf>,
    },
    /// Compare real and synthetic lesion slices.
    Analyze {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
    },
    /// Run the invariant suite.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenPhantoms => "gen-phantoms",
            Command::TrainVae { .. } => "train-vae",
            Command::GenMasks { .. } => "gen-masks",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Sample { .. } => "sample",
            Command::TrainDetector { .. } => "train-detector",
            Command::Sweep { .. } => "sweep",
            Command::Analyze { .. } => "analyze",
            Command::Verify => "verify",
        }
    }
}

/// An error tagged with the module and operation that raised it.
#[derive(Debug)]
pub struct Failure {
    pub op: &'static str,
    pub err: SalientError,
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self.err {
            SalientError::Config(_) => 2,
            SalientError::Numerical(_) | SalientError::Training { .. } | SalientError::Sampling(_) => 4,
            _ => 3,
        }
    }
}

/// `map_err` adaptor: `.map_err(at("phantom_data::load_cohort"))`.
pub fn at<E: Into<SalientError>>(op: &'static str) -> impl FnOnce(E) -> Failure {
    move |e| Failure { op, err: e.into() }
}

pub type CmdResult<T> = Result<T, Failure>;

/// What a subcommand produced.
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// `false` only for a verify run with failing checks.
    pub ok: bool,
}

fn load_config(common: &Common) -> CmdResult<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(at("config::load"))?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: &Cli) -> CmdResult<Outcome> {
    let cfg = load_config(&cli.common)?;
    std::fs::create_dir_all(&cli.common.out).map_err(at("cli::create_output_dir"))?;
    let start = chrono::Utc::now();
    let clock = Instant::now();
    let out = &cli.common.out;
    let outcome = match &cli.command {
        Command::GenPhantoms => commands::gen_phantoms(&cfg, out),
        Command::TrainVae { cohort } => commands::train_vae(&cfg, cohort, out),
        Command::GenMasks { vae } => commands::gen_masks(&cfg, vae, out),
        Command::TrainDiffusion { cohort } => commands::train_diffusion(&cfg, cohort, out),
        Command::Sample { model, masks, cohort, count } => commands::sample(&cfg, model, masks, cohort, *count, out),
        Command::TrainDetector { cohort, synthetic, dose } => {
            commands::train_detector(&cfg, cohort, synthetic.as_deref(), *dose, out)
        }
        Command::Sweep { synthetic, model, vae } => {
            commands::sweep(&cfg, synthetic.as_deref(), model.as_deref().zip(vae.as_deref()), out)
        }
        Command::Analyze { cohort, synthetic } => commands::analyze(&cfg, cohort, synthetic, out),
        Command::Verify => commands::verify(),
    }?;
    let manifest = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cli.common.seed,
        "command": cli.command.name(),
        "start": start.to_rfc3339(),
        "duration_s": clock.elapsed().as_secs_f64(),
        "artifact_paths": outcome.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "versions": {
            "salient": env!("CARGO_PKG_VERSION"),
            "salv": salient_core::phantom::SALV_VERSION,
            "salp": salient_core::params::SALP_VERSION,
            "report": salient_core::detection::REPORT_VERSION,
        },
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(at("cli::run_manifest"))?;
    std::fs::write(out.join("run_manifest.json"), text + "\n").map_err(at("cli::run_manifest"))?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) if o.ok => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(4),
        Err(f) => {
            eprintln!("salient {}: {}: {}", cli.command.name(), f.op, f.err);
            ExitCode::from(f.exit_code())
        }
    }
}
