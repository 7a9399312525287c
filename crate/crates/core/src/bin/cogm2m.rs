use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cogm2m::harness::{
    emit_csv, render_power_csv, run_calibration_check, run_fig5, run_fig6, run_power, run_proto, Experiment,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "cogm2m", version, about = "Spectrum sensing and S-eNodeB protocol experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-measure detector and compressive sensing false-alarm rates.
    Calibrate(Common),
    /// Detection probability against compression ratio.
    Fig5(Common),
    /// Miss-detection probability of the narrowband detectors against SNR.
    Fig6(Common),
    /// Run a protocol scenario and write its message trace.
    Proto(Common),
    /// Battery lifetime against radio duty cycle.
    Power(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
}

fn load(experiment: Experiment, args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path, experiment)?,
        None => ExperimentConfig::defaults(experiment),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(experiment: Experiment, args: &Common) -> Result<bool> {
    let cfg = load(experiment, args)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(match experiment {
            Experiment::Calibrate => "calibration.csv",
            Experiment::Fig5 => "fig5.csv",
            Experiment::Fig6 => "fig6.csv",
            Experiment::Proto => "trace.txt",
            Experiment::Power => "power.csv",
        }));
    match experiment {
        Experiment::Calibrate => {
            let report = run_calibration_check(&cfg)?;
            let text = report.render();
            print!("{text}");
            write(&out, &text)?;
            return Ok(report.all_pass());
        }
        Experiment::Fig5 => emit_csv(&run_fig5(&cfg)?, &out)?,
        Experiment::Fig6 => emit_csv(&run_fig6(&cfg)?, &out)?,
        Experiment::Proto => {
            let result = run_proto(&cfg)?;
            write(&out, &result.text)?;
            let mut tsv = out.clone().into_os_string();
            tsv.push(".tsv");
            write(Path::new(&tsv), &result.tsv)?;
            for r in &result.rejections {
                eprintln!("rejected: {r}");
            }
            if !result.violations.is_empty() {
                for v in &result.violations {
                    eprintln!("violation: {v}");
                }
                bail!("{} safety violations", result.violations.len());
            }
        }
        Experiment::Power => write(&out, &render_power_csv(&run_power(&cfg)?))?,
    }
    eprintln!("wrote {}", out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::Calibrate(a) => (Experiment::Calibrate, a),
        Command::Fig5(a) => (Experiment::Fig5, a),
        Command::Fig6(a) => (Experiment::Fig6, a),
        Command::Proto(a) => (Experiment::Proto, a),
        Command::Power(a) => (Experiment::Power, a),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.workers {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| run(experiment, args)),
        Err(e) => Err(e.into()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("calibration check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
