//! Command line front end: configuration, commands, plots and the verification table.

pub mod commands;
pub mod config;
pub mod svg;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{parse_sweep, RunConfig};
use verify::Faults;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Divergence(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl From<gatecut::Error> for CliError {
    fn from(e: gatecut::Error) -> Self {
        use gatecut::Error as E;
        match e {
            E::Divergence { .. } => CliError::Divergence(e.to_string()),
            E::Parse { .. } | E::Config(_) | E::Spec(_) | E::Idx { .. } | E::GateLimit { .. } | E::Checkpoint(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "gatecut", version, about = "Training-time unit and layer pruning with Bernoulli gates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed overriding every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeat the command for each value: one run directory per value under --out.
    #[arg(long, value_name = "KEY=v1,v2,...")]
    pub sweep: Option<String>,
    /// Extra `KEY=VALUE` overrides applied to the configuration.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with gate regularization and write metrics, events, reports and plots.
    Train(Common),
    /// Static parameter and FLOPS report of an architecture.
    Analyze(Common),
    /// Certification sweeps of the gate/weight dynamics of a small host network.
    Odelab {
        #[command(flatten)]
        common: Common,
        /// Also report the integrator's observed convergence order (dt, dt/2, dt/4).
        #[arg(long)]
        dt_halving: bool,
    },
    /// Run the engine's invariant checks and print a PASS/FAIL table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Deliberately break one computation to exercise the checks.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Compact a training checkpoint and write the reduced architecture and weights.
    Export {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to export (default: checkpoint.json in the config's output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Analyze(c) => c,
            Command::Odelab { common, .. } | Command::Verify { common, .. } | Command::Export { common, .. } => common,
        }
    }
}

fn overrides(common: &Common, extra: Option<(&str, toml::Value)>) -> Result<Vec<(String, toml::Value)>, CliError> {
    let mut o = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("--set expects KEY=VALUE, got {s}")))?;
        o.push((k.to_string(), config::parse_value(v)));
    }
    if let Some((k, v)) = extra {
        o.push((k.to_string(), v));
    }
    if let Some(seed) = common.seed {
        o.push(("seed".to_string(), toml::Value::Integer(seed as i64)));
    }
    Ok(o)
}

fn load(common: &Common, extra: Option<(&str, toml::Value)>) -> Result<RunConfig, CliError> {
    let o = overrides(common, extra)?;
    match &common.config {
        Some(p) => RunConfig::load(p, &o),
        None => RunConfig::from_str_with("", "<defaults>", std::path::Path::new("."), &o),
    }
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("gatecut-out"))
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs one command for one configuration; returns the text to print.
fn run_one(cmd: &Command, extra: Option<(&str, toml::Value)>, out: PathBuf) -> Result<String, CliError> {
    let common = cmd.common();
    match cmd {
        Command::Train(_) => {
            if common.config.is_none() {
                return Err(CliError::Input("train needs --config".into()));
            }
            commands::cmd_train(&load(common, extra)?, &out)
        }
        Command::Analyze(_) => {
            if common.config.is_none() {
                return Err(CliError::Input("analyze needs --config".into()));
            }
            commands::cmd_analyze(&load(common, extra)?, common.out.as_ref().map(|_| out.as_path()))
        }
        Command::Odelab { dt_halving, .. } => {
            let (summary, pass) = commands::cmd_odelab(&load(common, extra)?, &out, *dt_halving)?;
            if pass {
                Ok(summary)
            } else {
                Err(CliError::Verification(format!("certification sweep\n{summary}")))
            }
        }
        Command::Verify { inject_fault, .. } => {
            let faults = match inject_fault {
                None => Faults::default(),
                Some(f) => Faults::parse(f).ok_or_else(|| CliError::Input(format!("unknown fault {f}")))?,
            };
            let cfg = load(common, extra)?;
            let seed = cfg.seed.unwrap_or(0);
            let (table, pass) = commands::cmd_verify(seed, faults, common.out.as_ref().map(|_| out.as_path()), &cfg.hash)?;
            if pass {
                Ok(table)
            } else {
                Err(CliError::Verification(format!("\n{table}")))
            }
        }
        Command::Export { checkpoint, .. } => {
            let cfg = load(common, extra)?;
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
            commands::cmd_export(&ckpt, &out.join("export"), &cfg.hash)
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let common = cli.command.common();
    let result = match &common.sweep {
        None => run_one(&cli.command, None, out_dir(common)),
        Some(spec) => parse_sweep(spec).and_then(|(key, values)| {
            let mut lines = Vec::new();
            for v in values {
                let dir = out_dir(common).join(format!("{key}={}", value_label(&v)));
                lines.push(run_one(&cli.command, Some((&key, v)), dir)?);
            }
            Ok(lines.join("\n"))
        }),
    };
    match result {
        Ok(text) => {
            println!("{}", text.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
