use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use compop::channel::write_observations_csv;
use compop::config::ScenarioConfig;
use compop::imaging::{write_slice_csv, SlicePlane};
use compop::pipeline::{run_los, run_nlos, run_sweep, write_sweep_csv, RunOptions, RunOutput};
use compop::waveform::Severity;

/// Cooperative multi-point vehicle positioning simulator.
#[derive(Parser)]
#[command(name = "compop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario and list rule violations.
    Validate(Common),
    /// Image the target over the direct path.
    RunLos(Common),
    /// Recover the target from reflected paths.
    RunNlos(Common),
    /// Monte Carlo over the configured sweep axes.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Override `noise.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Write a slice of each path's power spectrum for trial 0.
    #[arg(long, value_parser = parse_plane)]
    emit_spectrum: Vec<SlicePlane>,
    /// Worker threads; 0 means one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Write trial 0's SFCW observations as CSV.
    #[arg(long)]
    dump_observations: bool,
}

fn parse_plane(s: &str) -> std::result::Result<SlicePlane, String> {
    s.parse().map_err(|e: compop::Error| e.to_string())
}

fn load(args: &Common) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.noise.seed = seed;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_report(dir: &Path, json: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("report.json");
    fs::write(&path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn emit(args: &Common, out: &RunOutput) -> Result<()> {
    write_report(&args.out_dir, &out.report.to_json()?)?;
    for (path_id, spectrum) in &out.spectra {
        for plane in &args.emit_spectrum {
            let name = format!("spectrum_path{path_id}_{}.csv", plane_name(*plane));
            write_slice_csv(spectrum, *plane, create(&args.out_dir, &name)?)?;
        }
    }
    if args.dump_observations {
        write_observations_csv(create(&args.out_dir, "observations.csv")?, &out.observations)?;
    }
    Ok(())
}

fn plane_name(p: SlicePlane) -> &'static str {
    match p {
        SlicePlane::Xy => "xy",
        SlicePlane::Xz => "xz",
        SlicePlane::Yz => "yz",
    }
}

fn options(args: &Common) -> RunOptions {
    RunOptions {
        workers: args.workers,
        keep_spectra: !args.emit_spectrum.is_empty(),
        keep_observations: args.dump_observations,
    }
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<compop::Error>().map(compop::Error::root),
            Some(compop::Error::InvalidConfig(_) | compop::Error::TooFewPaths(_) | compop::Error::Json(_))
        )
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate(args) => {
            let cfg = load(&args)?;
            let report = cfg.validate()?;
            for v in &report.violations {
                let level = match v.severity {
                    Severity::Warning => "warning",
                    Severity::Error => "error",
                };
                println!("{level}: {:?}: {}", v.rule, v.message);
            }
            if report.is_empty() {
                println!("ok");
            }
            Ok(!report.has_errors())
        }
        Command::RunLos(args) => {
            let out = run_los(&load(&args)?, &options(&args))?;
            emit(&args, &out)?;
            Ok(true)
        }
        Command::RunNlos(args) => {
            let out = run_nlos(&load(&args)?, &options(&args))?;
            emit(&args, &out)?;
            Ok(true)
        }
        Command::Sweep(args) => {
            let report = run_sweep(&load(&args)?, &options(&args))?;
            write_report(&args.out_dir, &report.to_json()?)?;
            write_sweep_csv(&report, create(&args.out_dir, "sweep.csv")?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
