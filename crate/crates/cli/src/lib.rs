//! Experiment runner for the fedapt simulator.
//!
//! `fedapt run` builds a world, frozen encoders, and a client population from
//! a TOML config, trains the configured method for every repeat, and writes
//! plot-ready metrics. `fedapt compare` lines up finished runs.

pub mod compare;
pub mod config;
pub mod runner;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fedapt_core::gradcheck::{run_suite, GradCheckDims};

use crate::compare::{Comparison, WorldMismatch};
use crate::config::{flag_path, ConfigError, ExperimentConfig, Override};

#[derive(Debug, Parser)]
#[command(name = "fedapt", version, about = "Federated adaptive prompt tuning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train and evaluate one configuration over its repeats.
    Run(RunArgs),
    /// Tabulate per-domain accuracy of two or more finished runs.
    Compare(CompareArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config file; defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub supervision: Option<String>,
    #[arg(long)]
    pub rounds: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub domains: Option<String>,
    #[arg(long)]
    pub clients_per_domain: Option<String>,
    #[arg(long)]
    pub tau_q: Option<String>,
    #[arg(long)]
    pub key_scheme: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub repeats: Option<String>,
    /// `path=value` override; `--fed.rounds=50` is shorthand for
    /// `--set fed.rounds=50`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Output directories of finished runs; the first is the reference.
    #[arg(required = true, num_args = 2..)]
    pub runs: Vec<PathBuf>,
    /// Also write compare.csv and compare.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(e) if e.downcast_ref::<WorldMismatch>().is_some() => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Rewrites `--a.b=v` and `--a.b v` into `--set a.b=v`.
pub fn expand_dotted(args: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(text) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            out.push(arg);
            continue;
        };
        let (name, value) = match text.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (text, None),
        };
        if !name.contains('.') {
            out.push(arg);
            continue;
        }
        let value = value.or_else(|| it.next().and_then(|v| v.into_string().ok())).unwrap_or_default();
        out.push("--set".into());
        out.push(format!("{name}={value}").into());
    }
    out
}

impl RunArgs {
    /// Named flags first, then `--set` paths in command-line order.
    pub fn overrides(&self) -> Result<Vec<Override>, ConfigError> {
        let named = [
            ("mode", &self.mode),
            ("supervision", &self.supervision),
            ("rounds", &self.rounds),
            ("seed", &self.seed),
            ("beta", &self.beta),
            ("domains", &self.domains),
            ("clients-per-domain", &self.clients_per_domain),
            ("tau-q", &self.tau_q),
            ("key-scheme", &self.key_scheme),
            ("out", &self.out),
            ("repeats", &self.repeats),
        ];
        let mut out: Vec<Override> = named
            .into_iter()
            .filter_map(|(flag, v)| v.as_ref().map(|v| Override::new(flag_path(flag).expect("known flag"), v.clone())))
            .collect();
        // Paths are written as strings so that `--out 123` stays a path.
        if let Some(o) = out.iter_mut().find(|o| o.path == "output_dir") {
            o.value = toml::Value::String(o.value.clone()).to_string();
        }
        for s in &self.set {
            out.push(Override::parse(s)?);
        }
        Ok(out)
    }

    pub fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        let overrides = self.overrides()?;
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_toml_str("", "defaults", &overrides),
        }
    }
}

fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let checks = run_suite(&GradCheckDims::default(), args.trials).map_err(anyhow::Error::from)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.max_rel_err < 1e-4;
        failed += usize::from(!ok);
        println!(
            "{:<38} d/d {:<13} trials {:>3}  max rel err {:.2e}  {}",
            c.objective,
            c.parameter,
            c.trials,
            c.max_rel_err,
            if ok { "ok" } else { "FAILED" }
        );
    }
    println!("{:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} gradient checks exceeded 1e-4").into());
    }
    Ok(())
}

/// Runs a parsed command.
pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let outcome = runner::execute(&cfg)?;
            let a = &outcome.aggregate;
            println!(
                "{} {}: average accuracy {:.4} ± {:.4} over seeds {:?} -> {}",
                a.mode,
                a.supervision,
                a.average.mean,
                a.average.std,
                a.seeds,
                outcome.output_dir.display()
            );
            Ok(())
        }
        Command::Compare(args) => {
            let cmp = Comparison::load(&args.runs)?;
            print!("{}", cmp.to_text());
            if let Some(dir) = &args.out {
                cmp.write(dir)?;
            }
            Ok(())
        }
        Command::Gradcheck(args) => gradcheck(&args),
    }
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(expand_dotted(args)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
