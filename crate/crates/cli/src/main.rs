//! `spandmd`: generate spans, fit operators and run the sweep protocols.
//!
//! Exit codes: 0 success, 2 usage, 3 validation or input error, 4 nothing
//! usable produced.

mod config;
mod fit;
mod generate;
mod output;
mod sources;
mod stats;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{ArgAction, CommandFactory, Parser, Subcommand};

use crate::config::{file_layer, resolve};
use crate::output::TotalFailure;
use crate::sweep::{Settings, SweepCommand};

#[derive(Debug, Parser)]
#[command(
    name = "spandmd",
    version,
    about = "Linear surrogates for spans of residual blocks"
)]
struct Cli {
    /// TOML file of settings; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write SDMS span files from the toy or linear source
    Generate(generate::GenerateFlags),
    /// Fit one operator to an SDMS file and score it on held-out images
    Fit(fit::FitFlags),
    /// Batch experiment protocols
    #[command(subcommand)]
    Sweep(SweepCommand),
}

fn missing(flag: &str) -> ! {
    Cli::command()
        .error(
            ErrorKind::MissingRequiredArgument,
            format!("{flag} is required (as a flag or in the config file)"),
        )
        .exit()
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Generate(flags) => {
            let cfg: generate::GenerateConfig = resolve(&flags, file_layer(cfg_path, &["generate"])?)?;
            let out = cfg.out.clone().unwrap_or_else(|| missing("--out"));
            let cfg = generate::GenerateConfig {
                source: cfg.source.normalized(),
                ..cfg
            };
            let manifest = generate::run(cfg, out)?;
            output::sayln!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Fit(flags) => {
            let cfg: fit::FitSettings = resolve(&flags, file_layer(cfg_path, &["fit"])?)?;
            let input = cfg.input.clone().unwrap_or_else(|| missing("--in"));
            fit::run(cfg, input)?;
        }
        Command::Sweep(cmd) => {
            let layer = file_layer(cfg_path, &["sweep", cmd.name()])?;
            let settings = match cmd {
                SweepCommand::Headline(f) => Settings::Headline(resolve(&f, layer)?),
                SweepCommand::Rank(f) => Settings::Rank(resolve(&f, layer)?),
                SweepCommand::Calib(f) => Settings::Calib(resolve(&f, layer)?),
                SweepCommand::Extrap(f) => Settings::Extrap(resolve(&f, layer)?),
                SweepCommand::Downstream(f) => Settings::Downstream(resolve(&f, layer)?),
                SweepCommand::Tokens(f) => Settings::Tokens(resolve(&f, layer)?),
                SweepCommand::Pca(f) => Settings::Pca(resolve(&f, layer)?),
                SweepCommand::Stats(f) => Settings::Stats(resolve(&f, layer)?),
            }
            .normalized();
            let out = match (&settings, settings.out()) {
                (Settings::Stats(s), _) => {
                    if s.input.is_none() {
                        missing("--in");
                    }
                    None
                }
                (Settings::Calib(s), Some(out)) if s.common.source.source == sources::SourceKind::Planted => {
                    out.cloned()
                }
                (_, Some(Some(out))) => Some(out.clone()),
                _ => missing("--out"),
            };
            sweep::run(settings, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<TotalFailure>().is_some() {
                ExitCode::from(4)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
