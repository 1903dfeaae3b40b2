//! `levyrisk`: command-line front end for the levy-risk library.

mod commands;
mod config;
mod record;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{Overrides, RunConfig};
use record::Record;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<levy_risk::Error> for CliError {
    fn from(e: levy_risk::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "levyrisk", version, about = "BSDEs with jumps, risk measures and risk-minimal portfolios")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON config file, or a previous result record to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the JSON record (default stdout).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Where to write per-path or per-step CSV output.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n_paths: Option<usize>,
    #[arg(long, global = true)]
    n_steps: Option<usize>,
    #[arg(long, global = true)]
    basis_degree: Option<u32>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    r: Option<f64>,
    /// Horizon.
    #[arg(long = "T", visible_alias = "horizon", global = true)]
    horizon: Option<f64>,
    /// Initial wealth.
    #[arg(long, global = true)]
    x0: Option<f64>,
    /// Jump atom intensity; repeat once per atom.
    #[arg(long, global = true)]
    jump_lambda: Vec<f64>,
    /// Jump atom coefficient; repeat once per atom.
    #[arg(long, global = true, allow_hyphen_values = true)]
    jump_gamma: Vec<f64>,
    #[arg(long, global = true)]
    tolerance: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct ClaimArgs {
    /// constant:A, brownian, brownian-square, stock, call:K, put:K, optimal-wealth
    #[arg(long, allow_hyphen_values = true)]
    claim: Option<String>,
    /// zero, entropic, quadratic:A, replication
    #[arg(long)]
    driver: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate Brownian increments and jump counts.
    Simulate,
    /// Solve a BSDE with jumps for a terminal claim.
    SolveBsde {
        #[command(flatten)]
        claim: ClaimArgs,
        /// regression or linear
        #[arg(long)]
        method: Option<String>,
    },
    /// Static risk of a claim under a BSDE-induced risk measure.
    Risk {
        #[command(flatten)]
        claim: ClaimArgs,
    },
    /// Dual representation over a grid of diffusion scenarios.
    DualRisk {
        #[arg(long, allow_hyphen_values = true)]
        claim: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        theta_lo: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        theta_hi: Option<f64>,
        #[arg(long)]
        theta_n: Option<usize>,
    },
    /// Optimal terminal wealth for log or power utility.
    Utility {
        /// log or power
        #[arg(long)]
        utility: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f64>,
    },
    /// Minimal entropic risk of terminal wealth.
    RiskMin,
    /// Solve or verify the stochastic differential game.
    Hjbi {
        /// solve or verify
        action: Option<String>,
    },
    /// Stackelberg newsvendor game with delayed demand.
    Newsvendor {
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        cost: Option<f64>,
        #[arg(long)]
        salvage: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        demand_mean: Option<f64>,
        #[arg(long)]
        demand_sd: Option<f64>,
        #[arg(long)]
        delay: Option<f64>,
        #[arg(long)]
        nv_steps: Option<usize>,
        #[arg(long)]
        max_sweeps: Option<usize>,
    },
    /// Quick battery of self-checks.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::SolveBsde { .. } => "solve-bsde",
            Command::Risk { .. } => "risk",
            Command::DualRisk { .. } => "dual-risk",
            Command::Utility { .. } => "utility",
            Command::RiskMin => "risk-min",
            Command::Hjbi { .. } => "hjbi",
            Command::Newsvendor { .. } => "newsvendor",
            Command::Verify => "verify",
        }
    }
}

fn overrides(cli: Cli) -> (Option<&'static str>, Overrides) {
    let g = cli.global;
    let mut o = Overrides {
        mu: g.mu,
        sigma: g.sigma,
        r: g.r,
        horizon: g.horizon,
        n_steps: g.n_steps,
        jump_lambda: g.jump_lambda,
        jump_gamma: g.jump_gamma,
        n_paths: g.n_paths,
        basis_degree: g.basis_degree,
        seed: g.seed,
        x0: g.x0,
        tolerance: g.tolerance,
        output: g.out,
        csv: g.csv,
        ..Overrides::default()
    };
    let name = cli.command.as_ref().map(Command::name);
    match cli.command {
        Some(Command::SolveBsde { claim, method }) => {
            o.claim = claim.claim;
            o.driver = claim.driver;
            o.method = method;
        }
        Some(Command::Risk { claim }) => {
            o.claim = claim.claim;
            o.driver = claim.driver;
        }
        Some(Command::DualRisk { claim, theta_lo, theta_hi, theta_n }) => {
            o.claim = claim;
            o.theta_lo = theta_lo;
            o.theta_hi = theta_hi;
            o.theta_n = theta_n;
        }
        Some(Command::Utility { utility, delta }) => {
            o.utility = utility;
            o.delta = delta;
        }
        Some(Command::Hjbi { action }) => o.action = action,
        Some(Command::Newsvendor { k, cost, salvage, demand_mean, demand_sd, delay, nv_steps, max_sweeps }) => {
            o.nv_k = k;
            o.nv_cost = cost;
            o.nv_salvage = salvage;
            o.nv_mean = demand_mean;
            o.nv_sd = demand_sd;
            o.nv_delta = delay;
            o.nv_steps = nv_steps;
            o.max_sweeps = max_sweeps;
        }
        _ => {}
    }
    (name, o)
}

fn resolve(cli: Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    let (name, o) = overrides(cli);
    if let Some(name) = name {
        cfg.command = name.to_string();
    }
    if cfg.command.is_empty() {
        return Err(CliError::Config("no command given on the command line or in the config file".into()));
    }
    cfg.apply(o)?;
    cfg.validate()?;
    Ok(cfg)
}

fn emit(cfg: &RunConfig, text: &str) -> Result<(), CliError> {
    match &cfg.output {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        // simulate without --csv already used stdout for the paths
        None if cfg.command == "simulate" && cfg.csv.is_none() => {
            std::io::stderr().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("levyrisk: {e}");
            return ExitCode::from(e.exit_code());
        }
    };

    let start = Instant::now();
    let outcome = commands::run(&cfg);
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;

    let (results, errors, code) = match outcome {
        Ok(o) => {
            let code = if o.failures.is_empty() { 0 } else { 1 };
            (o.results, o.failures, code)
        }
        Err(e) => {
            eprintln!("levyrisk: {e}");
            (serde_json::Value::Null, vec![e.to_string()], e.exit_code())
        }
    };
    let rec = Record {
        command: cfg.command.clone(),
        config: serde_json::to_value(&cfg).unwrap_or_default(),
        results,
        errors,
        seed: cfg.seed,
        runtime_ms,
    };
    if let Err(e) = emit(&cfg, &record::to_string(&rec)) {
        eprintln!("levyrisk: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<RunConfig, CliError> {
        let mut full = vec!["levyrisk"];
        full.extend_from_slice(args);
        resolve(Cli::try_parse_from(full).map_err(|e| CliError::Config(e.to_string()))?)
    }

    #[test]
    fn flags_reach_the_config() {
        let cfg = parse(&["risk-min", "--mu", "0.07", "--sigma", "0.3", "--T", "2", "--x0", "3", "--seed", "9"]).unwrap();
        assert_eq!(cfg.command, "risk-min");
        assert_eq!(cfg.market.mu.at(0.0), 0.07);
        assert_eq!(cfg.market.sigma.at(0.0), 0.3);
        assert_eq!(cfg.market.horizon, 2.0);
        assert_eq!(cfg.x0, 3.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.paths(), 20_000);
    }

    #[test]
    fn simulate_defaults_to_fewer_paths() {
        assert_eq!(parse(&["simulate"]).unwrap().paths(), 100);
    }

    #[test]
    fn jump_atoms_from_flags() {
        let cfg = parse(&["hjbi", "solve", "--jump-lambda", "0.5", "--jump-gamma", "-0.2"]).unwrap();
        assert_eq!(cfg.action, "solve");
        assert_eq!(cfg.market.atoms.len(), 1);
        assert_eq!(cfg.market.atoms[0].gamma.at(0.0), -0.2);
        assert!(parse(&["verify", "--jump-lambda", "0.5"]).is_err());
    }

    #[test]
    fn negative_mu_is_a_value() {
        let cfg = parse(&["utility", "--mu", "-0.02", "--utility", "power", "--delta", "-1"]).unwrap();
        assert_eq!(cfg.market.mu.at(0.0), -0.02);
        assert_eq!(cfg.delta, -1.0);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for args in [&["risk-min", "--sigma", "-0.2"][..], &["risk-min", "--x0", "0"], &["simulate", "--n-paths", "0"]] {
            assert!(matches!(parse(args), Err(CliError::Config(_))), "{args:?}");
        }
    }

    #[test]
    fn core_errors_are_classified() {
        let e: CliError = levy_risk::Error::NoConvergence { iterations: 3, residual: 1.0 }.into();
        assert_eq!(e.exit_code(), 1);
        let e: CliError = levy_risk::Error::InvalidArgument("x".into()).into();
        assert_eq!(e.exit_code(), 2);
    }
}
