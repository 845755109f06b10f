//! Command-line pipeline: simulate, detrend, calibrate, filter, diagnose and
//! predict shot-noise Cox count models.

mod artifacts;
mod config;
mod failure;
mod ingest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::failure::categorize;
use crate::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "shotcox", version, about = "Shot-noise Cox count models with Lévy-copula dependence")]
struct Cli {
    /// Configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct EmFlags {
    #[arg(long)]
    em_iters: Option<usize>,
    #[arg(long)]
    mcmc_iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic claims/exposure pair.
    Simulate,
    /// Fit the calendar GLM and build the exposure series.
    FitGlm,
    /// Calibrate each margin by Monte Carlo EM.
    FitMarginal(EmFlags),
    /// Calibrate the dependence parameter with margins fixed.
    FitCopula(EmFlags),
    /// Filter the latent intensity under the fitted model.
    Filter {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Residuals, autocorrelations, empirical copulas and decomposition.
    Diagnose,
    /// Simulate future count totals.
    Predict {
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        n_sims: Option<usize>,
    },
    /// Run every stage after `simulate` in order.
    Run,
    /// Print the documented configuration keys with their defaults.
    ConfigKeys,
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| failure::fail(failure::Category::Config, format!("reading {}: {e}", p.display())))?;
            Config::parse(&text, p.parent().unwrap_or(std::path::Path::new(".")))?
        }
        None => Config::defaults(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    let mut set = |k: &str, v: Option<usize>| v.map_or(Ok(()), |v| cfg.set(k, &v.to_string()));
    match &cli.command {
        Command::FitMarginal(f) | Command::FitCopula(f) => {
            set("em_iters", f.em_iters)?;
            set("mcmc_iters", f.mcmc_iters)?;
        }
        Command::Filter { iterations, samples } => {
            set("filter_iters", *iterations)?;
            set("filter_samples", *samples)?;
        }
        Command::Predict { horizon, n_sims } => {
            set("horizon", *horizon)?;
            set("n_sims", *n_sims)?;
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::ConfigKeys = cli.command {
        print!("{}", config::documentation());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let p = Pipeline::new(cfg, &cli.out_dir)?;
    let stages: &[&str] = match &cli.command {
        Command::Simulate => &["simulate"],
        Command::FitGlm => &["fit-glm"],
        Command::FitMarginal(_) => &["fit-marginal"],
        Command::FitCopula(_) => &["fit-copula"],
        Command::Filter { .. } => &["filter"],
        Command::Diagnose => &["diagnose"],
        Command::Predict { .. } => &["predict"],
        Command::Run => &pipeline::STAGES[1..],
        Command::ConfigKeys => &[],
    };
    let two = p.two_margins()?;
    for s in stages {
        if *s == "fit-copula" && matches!(cli.command, Command::Run) && !two {
            continue;
        }
        let m = p.run(s)?;
        println!("{s}: wrote {} outputs", m.outputs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = categorize(&e);
            eprintln!("error category={} message={:#}", cat.name(), e);
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
