use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irmlab::experiments::{execute, Command, ExperimentConfig};
use irmlab::train::Method;

#[derive(Parser)]
#[command(name = "irmlab", version, about = "Oracle tables and IRM/CDM experiments on synthetic multi-environment data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analytic accuracy of the four feature families for each ρ.
    OracleTable(Common),
    /// Grid-searched test accuracy per method and ρ, with the oracle line.
    SweepRho(Common),
    /// IRM and friends along the CMNIST → CMNIST+ interpolation.
    SweepInterp(Common),
    /// One method, one dataset: grid search, per-iteration log and probes.
    Train(Common),
    /// All seven methods plus the oracle row over the ρ list.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated ρ values.
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    /// Comma-separated w_plus values.
    #[arg(long = "w-plus", value_delimiter = ',')]
    w_plus: Option<Vec<f64>>,
    /// Comma-separated methods (ERM, IRM, IRMBAL, MMD, ACDM, IRM_MMD, IRM_ACDM).
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<String>>,
    #[arg(long)]
    balanced: Option<bool>,
}

fn resolve(c: &Common) -> irmlab::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(j) = c.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(r) = &c.rho {
        cfg.rho = r.clone();
    }
    if let Some(w) = &c.w_plus {
        cfg.w_plus = w.clone();
    }
    if let Some(ms) = &c.method {
        cfg.methods = ms.iter().map(|m| m.parse::<Method>()).collect::<irmlab::Result<_>>()?;
    }
    if let Some(b) = c.balanced {
        cfg.balanced = Some(b);
    }
    Ok(cfg)
}

fn error_record(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return error_record("usage", e.to_string().trim()),
    };
    let (command, common) = match &cli.command {
        Cmd::OracleTable(c) => (Command::OracleTable, c),
        Cmd::SweepRho(c) => (Command::SweepRho, c),
        Cmd::SweepInterp(c) => (Command::SweepInterp, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Compare(c) => (Command::Compare, c),
    };
    match resolve(common).and_then(|cfg| execute(command, &cfg, &common.out)) {
        Ok(files) => {
            for f in files {
                println!("{}", common.out.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => error_record(e.kind(), &e.to_string()),
    }
}
