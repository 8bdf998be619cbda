use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ndde_cli::commands::{
    run_check, run_picard, run_simulate, CheckOptions, Outcome, PicardOptions, SimulateOptions, EXIT_ERROR,
};
use ndde_cli::config::{load_config, RunConfig};
use ndde_cli::presets;

/// Criteria checks, direct integration and Picard iteration for neutral
/// delay differential equations.
///
/// CONFIG is a path, or `@name` for a shipped preset (see `ndde example`).
/// Set NDDE_THREADS to cap the worker threads.
#[derive(Parser)]
#[command(name = "ndde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the criteria. Exit 0 satisfied, 2 violated, 3 inconclusive.
    Check {
        config: String,
        /// End of the certification grid.
        #[arg(long)]
        tmax: Option<f64>,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Print flat `key = value` lines instead of the table.
        #[arg(long)]
        kv: bool,
    },
    /// Integrate directly with RK4.
    Simulate {
        config: String,
        #[arg(long = "T")]
        t_end: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        /// Write the trajectory (t, x, xprime) here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Iterate the fixed-point operator. Exit 3 when it does not converge.
    Picard {
        config: String,
        #[arg(long = "T")]
        t_end: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        /// Write the fixed point (t, z, x) here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a shipped preset, or list them when no name is given.
    Example {
        name: Option<String>,
        /// Write the preset here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(arg: &str) -> Result<RunConfig> {
    Ok(match arg.strip_prefix('@') {
        Some(name) => presets::load_preset(name)?,
        None => load_config(Path::new(arg))?,
    })
}

fn positive(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => bail!("--{name} must be positive and finite, got {x}"),
        _ => Ok(()),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("NDDE_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().with_context(|| format!("NDDE_THREADS = {raw:?} is not a count"))?;
    if n == 0 {
        bail!("NDDE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    configure_threads()?;
    match cli.command {
        Command::Check { config, tmax, json, kv } => {
            positive("tmax", tmax)?;
            let cfg = load(&config)?;
            Ok(run_check(&cfg, &CheckOptions { tmax, json, key_values: kv })?.1)
        }
        Command::Simulate { config, t_end, step, csv } => {
            positive("T", t_end)?;
            positive("step", step)?;
            let cfg = load(&config)?;
            Ok(run_simulate(&cfg, &SimulateOptions { t_end, step, csv })?.1)
        }
        Command::Picard { config, t_end, tol, csv } => {
            positive("T", t_end)?;
            positive("tol", tol)?;
            let cfg = load(&config)?;
            Ok(run_picard(&cfg, &PicardOptions { t_end, tol, csv })?.1)
        }
        Command::Example { name: None, out: Some(_) } => bail!("--out needs a preset name"),
        Command::Example { name: None, out: None } => {
            let mut text = String::new();
            for p in presets::PRESETS {
                text.push_str(&format!("{:<18} {}\n", p.name, p.summary));
            }
            Ok(Outcome { text, code: 0 })
        }
        Command::Example { name: Some(name), out } => {
            let p = presets::find(&name)
                .with_context(|| format!("no preset `{name}`; available: {}", presets::names().join(", ")))?;
            match out {
                Some(path) => {
                    std::fs::write(&path, p.text).with_context(|| format!("writing {}", path.display()))?;
                    Ok(Outcome { text: format!("wrote {}\n", path.display()), code: 0 })
                }
                None => Ok(Outcome { text: p.text.to_string(), code: 0 }),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{}", out.text);
            ExitCode::from(out.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
