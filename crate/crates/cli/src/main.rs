mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use biphoton::correlation::CorrelationParams;
use biphoton::Exec;
use clap::{Args, Parser, Subcommand};

use crate::commands::{CorrelateFlags, FransonFlags, Output, PowerFlags, ScanFlags};
use crate::config::{ExperimentConfig, PRESETS};
use crate::error::{usage, CliError, CliResult};

/// Simulate and analyse narrowband photon pairs from a microring source.
#[derive(Parser)]
#[command(name = "biphoton", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name, see `biphoton presets`.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `run.seed`.
    #[arg(long, env = "BIPHOTON_SEED")]
    seed: Option<u64>,
    /// Output directory; defaults to `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every kernel on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Transmission scan with a Lorentzian fit, plus a thermal tuning table.
    Scan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        mode: Option<i32>,
        /// Temperature offsets in K, comma separated.
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
    },
    /// Simulate both detector channels and write .bpts tag files.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Histogram time differences between tag files.
    Correlate {
        /// One or more .bpts files; channel 0 is correlated against channel 1.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Bin width in ps [default: config value, else 84].
        #[arg(long)]
        bin: Option<u64>,
        /// Half range in ps [default: config value, else 50000].
        #[arg(long)]
        span: Option<u64>,
        #[arg(long, allow_hyphen_values = true)]
        offset: Option<i64>,
        /// Take correlation defaults from this config.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        background_correct: bool,
        /// Fit the double-exponential peak.
        #[arg(long)]
        fit: bool,
        /// Autocorrelate one channel through a virtual beam splitter.
        #[arg(long, value_name = "CHANNEL")]
        hbt: Option<u16>,
        /// Splitter ratio for --hbt.
        #[arg(long, default_value_t = 0.5)]
        split: f64,
        #[arg(long, env = "BIPHOTON_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Singles and coincidence rates against pump power.
    Powerscan {
        #[command(flatten)]
        common: Common,
        /// Pump powers in mW, comma separated.
        #[arg(long, value_delimiter = ',')]
        powers: Option<Vec<f64>>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        window_ns: Option<f64>,
    },
    /// Franson fringe scan with visibility and entanglement verdict.
    Franson {
        #[command(flatten)]
        common: Common,
        /// Number of equally spaced phases, or a comma separated list in rad.
        #[arg(long)]
        phases: Option<String>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Consolidate the artifacts of a run directory.
    Report { dir: PathBuf },
    /// List the built-in presets or print one.
    Presets { name: Option<String> },
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

/// Resolves the config, applies the seed override, validates it and
/// records the effective config next to the outputs.
fn prepare(common: &Common) -> CliResult<(ExperimentConfig, Output)> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => config::preset(name)?,
        (None, None) => return Err(usage("one of --config or --preset is required")),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.run.output_dir.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set run.output_dir"))?;
    let out = Output::create(&dir)?;
    out.write("config.json", &cfg.to_json())?;
    Ok((cfg, out))
}

fn parse_phases(text: &str) -> CliResult<Vec<f64>> {
    if let Ok(n) = text.trim().parse::<usize>() {
        return Ok(biphoton::franson::uniform_phases(n));
    }
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| usage(format!("bad phase {p:?}: {e}"))))
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Scan { common, noise, mode, temperatures } => {
            let (cfg, out) = prepare(&common)?;
            commands::scan(&cfg, &ScanFlags { noise, mode, temperatures }, &out, exec(common.sequential))
        }
        Command::Simulate { common, duration } => {
            let (cfg, out) = prepare(&common)?;
            if let Some(d) = duration {
                if !(d.is_finite() && d > 0.0) {
                    return Err(usage(format!("--duration must be positive, got {d}")));
                }
            }
            commands::simulate_cmd(&cfg, duration, &out, exec(common.sequential))
        }
        Command::Correlate {
            files,
            bin,
            span,
            offset,
            config: config_path,
            preset,
            normalize,
            background_correct,
            fit,
            hbt,
            split,
            seed,
            out,
            sequential,
        } => {
            let base = match (&config_path, &preset) {
                (Some(path), _) => ExperimentConfig::load(path)?.correlation,
                (None, Some(name)) => config::preset(name)?.correlation,
                (None, None) => Default::default(),
            };
            let base = base.params();
            let flags = CorrelateFlags {
                files,
                params: CorrelationParams {
                    bin_width_ps: bin.unwrap_or(base.bin_width_ps),
                    span_ps: span.unwrap_or(base.span_ps),
                    center_offset_ps: offset.unwrap_or(base.center_offset_ps),
                },
                normalize,
                background_correct,
                fit,
                hbt,
                split,
                seed,
            };
            commands::correlate(&flags, &Output::create(&out)?, exec(sequential))
        }
        Command::Powerscan { common, powers, duration, window_ns } => {
            let (cfg, out) = prepare(&common)?;
            commands::powerscan(&cfg, &PowerFlags { powers, duration, window_ns }, &out, exec(common.sequential))
        }
        Command::Franson { common, phases, duration } => {
            let phases = phases.as_deref().map(parse_phases).transpose()?;
            let (cfg, out) = prepare(&common)?;
            commands::franson(&cfg, &FransonFlags { phases, duration }, &out, exec(common.sequential))
        }
        Command::Report { dir } => report::report(&dir),
        Command::Presets { name: None } => {
            for (name, text) in PRESETS {
                let cfg = ExperimentConfig::from_json(text)?;
                println!("{name:<12} {}", cfg.description);
            }
            Ok(())
        }
        Command::Presets { name: Some(name) } => {
            print!("{}", config::preset_text(&name)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
