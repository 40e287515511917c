use std::path::PathBuf;
use std::process::ExitCode;

use chrono::Utc;
use clap::{Parser, Subcommand};
use phiflow_core::nonlinearity::check_assumptions;
use phiflow_core::NonlinearitySpec;
use phiflow_cli::error::{EXIT_OK, EXIT_VERDICT_FAILED};
use phiflow_cli::{output, run_experiment, CliError, CliResult, ExperimentConfig, REGISTRY};

#[derive(Parser)]
#[command(name = "phiflow", version, about = "Experiments on singular stochastic Phi-Laplace equations", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file or a registry id.
    Run {
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List registry experiments.
    List,
    /// Check conditions C1-C7 for one nonlinearity.
    CheckAssumptions {
        nonlinearity: String,
        #[arg(long, default_value_t = 1)]
        dimension: usize,
        #[arg(long, default_value_t = 100.0)]
        r_max: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

fn run(target: &str, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<i32> {
    let mut cfg = ExperimentConfig::load(target)?;
    if let Some(s) = seed {
        cfg.sde.seed = s;
    }
    if let Some(dir) = out {
        cfg.output.dir = dir.display().to_string();
    }
    cfg.validate()?;
    let basis = cfg.basis()?;
    let (bh, bv) = cfg.noise(&basis)?.hs_norms();
    println!("experiment {} (config {})", cfg.experiment.id, &cfg.hash()[..12]);
    println!("noise {}: sum b_k^2 = {bh}, sum b_k^2 lambda_k = {bv}", cfg.noise.rule);
    let started = Utc::now();
    let result = run_experiment(&cfg)?;
    let dir = output::write_run(PathBuf::from(&cfg.output.dir).as_path(), &cfg, &result, started, Utc::now())?;
    for v in &result.verdicts {
        println!("{} {}", if v.pass { "PASS" } else { "FAIL" }, v.check);
    }
    for n in &result.notes {
        println!("note: {n}");
    }
    println!("wrote {}", dir.display());
    Ok(if result.passed() { EXIT_OK } else { EXIT_VERDICT_FAILED })
}

fn list() {
    for i in REGISTRY {
        let crit = i.criterion.map(|c| format!("[{c}]")).unwrap_or_else(|| "[-]".into());
        println!("{:<18} {:<5} {} -- {}", i.id, crit, i.description, i.reproduces);
    }
}

fn check(id: &str, d: usize, r_max: f64, samples: usize) -> CliResult<i32> {
    if id.trim().is_empty() {
        return Err(CliError::Usage("missing nonlinearity id".into()));
    }
    let spec = NonlinearitySpec::from_id(id)?;
    let rep = check_assumptions(&spec, r_max, samples, d)?;
    println!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { target, seed, out } => run(&target, seed, out),
        Command::List => {
            list();
            Ok(EXIT_OK)
        }
        Command::CheckAssumptions { nonlinearity, dimension, r_max, samples } => check(&nonlinearity, dimension, r_max, samples),
    };
    match res {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            if matches!(e, CliError::Usage(_)) {
                eprintln!("usage: phiflow run <config|id> [--seed N] [--out DIR] | phiflow list | phiflow check-assumptions <nonlinearity-id>");
            }
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
