//! `debrisflow` — command-line front end for the debris-flow hazard
//! toolkit.
//!
//! The pipeline runs in stages, each a subcommand reading a shared config
//! file: `swi` integrates rainfall, `susceptibility` predicts source-cell
//! probability, `sample` draws one source set, `simulate` runs one case,
//! `calibrate` sweeps material parameters, `ensemble` aggregates Monte
//! Carlo hazard maps, `evaluate` scores change maps, `render` draws any
//! raster, and `synth` generates a demo catchment. Exit codes: 0 success,
//! 1 domain or validation failure, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use debrisflow_core::error::{Error, Result};

use config::RunConfig;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "debrisflow", version, about = "Debris-flow hazard mapping pipeline")]
struct Cli {
    /// Run configuration file (flat-sectioned key=value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: the config's [output] dir, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate rainfall into a maximum soil-water-index raster.
    Swi,
    /// Predict source-cell probability from terrain and soil water.
    Susceptibility,
    /// Draw one seeded source realization from the probability raster.
    Sample,
    /// Run one debris-flow case and write the bed-change map.
    Simulate,
    /// Rank material-parameter candidates against an observed change map.
    Calibrate,
    /// Run a Monte Carlo case ensemble and write hazard statistics.
    Ensemble,
    /// Score a predicted change map against an observed one.
    Evaluate,
    /// Render a raster to a PPM image.
    Render {
        /// Raster to draw.
        input: PathBuf,
        /// Color ramp: gray, diverging, or heat.
        #[arg(long, default_value = "gray")]
        ramp: String,
        /// Value mapped to the ramp start (default: data minimum).
        #[arg(long)]
        lo: Option<f64>,
        /// Value mapped to the ramp end (default: data maximum).
        #[arg(long)]
        hi: Option<f64>,
    },
    /// Generate the bundled synthetic demo catchment.
    Synth {
        /// Fine-grid cells per axis.
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Also simulate a reference bed-change map for calibration demos.
        #[arg(long)]
        with_observed: bool,
        /// Simulated seconds for the reference map.
        #[arg(long, default_value_t = 3600.0)]
        observed_duration: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Swi => "swi",
            Command::Susceptibility => "susceptibility",
            Command::Sample => "sample",
            Command::Simulate => "simulate",
            Command::Calibrate => "calibrate",
            Command::Ensemble => "ensemble",
            Command::Evaluate => "evaluate",
            Command::Render { .. } => "render",
            Command::Synth { .. } => "synth",
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Some(workers) = cli.workers {
        // Build the global pool before any parallel work; a failure here
        // only means a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    if let Err(e) = execute(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => Some(RunConfig::load(path)?),
        None => None,
    };
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::domain(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut manifest = Manifest::new(cli.command.name());
    if let Some(c) = &cfg {
        manifest.set_config(&c.origin, &c.raw);
    }
    manifest.set("out_dir", out_dir.display());
    if let Some(w) = cli.workers {
        manifest.set("workers", w);
    }
    if let Some(s) = cli.seed {
        manifest.set("seed_override", s);
    }

    let result = run_command(cli, cfg.as_ref(), &out_dir, &mut manifest);
    match &result {
        Ok(()) => {
            let path = manifest.write(&out_dir, "ok", None)?;
            println!("wrote {}", path.display());
        }
        Err(e) => {
            // Best effort: the manifest should record failures too.
            let _ = manifest.write(&out_dir, "error", Some(&e.to_string()));
        }
    }
    result
}

fn require_config<'a>(cfg: Option<&'a RunConfig>, name: &str) -> Result<&'a RunConfig> {
    cfg.ok_or_else(|| Error::domain(format!("`{name}` needs --config <file>")))
}

fn run_command(
    cli: &Cli,
    cfg: Option<&RunConfig>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let name = cli.command.name();
    match &cli.command {
        Command::Swi => commands::cmd_swi(require_config(cfg, name)?, out_dir, m),
        Command::Susceptibility => {
            commands::cmd_susceptibility(require_config(cfg, name)?, out_dir, m)
        }
        Command::Sample => {
            commands::cmd_sample(require_config(cfg, name)?, cli.seed, out_dir, m)
        }
        Command::Simulate => {
            commands::cmd_simulate(require_config(cfg, name)?, cli.seed, out_dir, m)
        }
        Command::Calibrate => {
            commands::cmd_calibrate(require_config(cfg, name)?, cli.seed, out_dir, m)
        }
        Command::Ensemble => {
            commands::cmd_ensemble(require_config(cfg, name)?, cli.seed, out_dir, m)
        }
        Command::Evaluate => commands::cmd_evaluate(require_config(cfg, name)?, out_dir, m),
        Command::Render { input, ramp, lo, hi } => {
            commands::cmd_render(input, ramp, *lo, *hi, out_dir, m)
        }
        Command::Synth { size, with_observed, observed_duration } => commands::cmd_synth(
            *size,
            *with_observed,
            *observed_duration,
            cli.seed,
            out_dir,
            m,
        ),
    }
}
