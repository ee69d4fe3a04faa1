use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use acdc_kmpc::edmd::{fit_model, KoopmanModel, TrainingDataset};
use acdc_kmpc::gssa::read_lifted_csv;
use acdc_kmpc::harness::{self, ControllerKind, HarnessConfig};
use acdc_kmpc::plant::PlantMode;
use acdc_kmpc::Error;

#[derive(Parser)]
#[command(name = "acdc-kmpc", version, about = "Koopman MPC of a single-phase boost rectifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Plant model: switched or averaged.
    #[arg(long, global = true)]
    mode: Option<PlantMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the perturbed-input training run; writes raw.csv and lifted.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit (A, B) to a training directory.
    Fit {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ridge: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-step prediction check on a held-out run.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Comparison CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop load-step run.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Also write SVG figures.
        #[arg(long)]
        svg: bool,
    },
    /// Recompute metrics from a waveform CSV.
    Metrics {
        waveform: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every configured controller and mismatch, in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> anyhow::Result<HarnessConfig> {
    let mut cfg = match &c.config {
        Some(path) => HarnessConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> anyhow::Result<KoopmanModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(KoopmanModel::from_text(&text)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = common.mode {
                cfg.train_mode = m;
            }
            let run = harness::run_training(&cfg)?;
            harness::write_training(&out, &run)?;
            log::info!("{} samples, {} lifted rows", run.samples.len(), run.lifted.len());
        }
        Command::Fit { dir, out, ridge, common } => {
            let cfg = load_config(&common)?;
            let path = dir.join("lifted.csv");
            let rows = read_lifted_csv(&fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
            let lifts: Vec<_> = rows.iter().map(|r| r.z).collect();
            let inputs: Vec<_> = rows.iter().map_while(|r| r.u).collect();
            if inputs.len() + 1 != lifts.len() {
                return Err(Error::Parse("lifted.csv needs inputs on every row but the last".into()).into());
            }
            let fit = fit_model(&TrainingDataset::from_lifts(&lifts, &inputs)?, ridge.unwrap_or(cfg.ridge))?;
            let r = &fit.report;
            if r.rank_deficient {
                log::warn!("training data is rank deficient (rank {})", r.rank);
            }
            if r.ridge_material {
                log::warn!("ridge shifts the solution by {:.3e} (relative)", r.ridge_shift);
            }
            eprintln!(
                "rank {}  residual {:.3e}  spectral radius {:.4}  ridge shift {:.2e}",
                r.rank,
                r.residual,
                fit.model.spectral_radius(),
                r.ridge_shift
            );
            fs::write(&out, fit.model.to_text())?;
        }
        Command::Validate { common, model, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = common.mode {
                cfg.train_mode = m;
            }
            let model = load_model(&model)?;
            let v = harness::run_validation(&cfg, &model, cfg.seed)?;
            let mut buf = Vec::new();
            harness::write_validation_csv(&mut buf, &v.rows, cfg.plant.omega)?;
            match out {
                Some(path) => fs::write(path, buf)?,
                None => print!("{}", String::from_utf8_lossy(&buf)),
            }
            eprintln!(
                "max |z3 error| {:.4} V  max |i error| {:.4} A",
                v.metrics.max_voltage_error(),
                v.metrics.max_current_error()
            );
        }
        Command::Run { common, controller, model, out, svg } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = common.mode {
                cfg.mode = m;
            }
            if let Some(c) = controller {
                cfg.controller = c;
            }
            let model = model.as_deref().map(load_model).transpose()?;
            let run = harness::run_closed_loop(&cfg, model.as_ref())?;
            harness::write_closed_loop(&out, &run, svg || cfg.svg)?;
            print!("{}", toml::to_string(&run.metrics)?);
        }
        Command::Metrics { waveform, common, controller, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = controller {
                cfg.controller = c;
            }
            let rows = harness::read_waveform_csv(&fs::read_to_string(&waveform)?)?;
            let m = harness::compute_metrics(&rows, &cfg.plant, &cfg.scenario(), cfg.pf_min)?;
            match out {
                Some(path) => harness::write_metrics(&path, &m)?,
                None => print!("{}", toml::to_string(&m)?),
            }
        }
        Command::Sweep { common, model, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = common.mode {
                cfg.mode = m;
            }
            let model = model.as_deref().map(load_model).transpose()?;
            let rows = harness::run_sweep(&cfg, model.as_ref())?;
            fs::create_dir_all(&out)?;
            let mut buf = Vec::new();
            harness::write_sweep_csv(&mut buf, &rows)?;
            fs::write(out.join("sweep.csv"), &buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Parse(_)))
                || e.downcast_ref::<toml::de::Error>().is_some();
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
