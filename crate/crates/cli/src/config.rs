use std::path::{Path, PathBuf};

use levy_risk::newsvendor::{LeaderOptions, NewsvendorSpec};
use levy_risk::{Atom, Curve, MarketModel};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const COMMANDS: &[&str] = &["simulate", "solve-bsde", "risk", "dual-risk", "utility", "risk-min", "hjbi", "newsvendor", "verify"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThetaGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for ThetaGrid {
    fn default() -> Self {
        ThetaGrid { lo: -0.5, hi: 0.0, n: 21 }
    }
}

/// Fully resolved run configuration, echoed into every result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub market: MarketModel,
    pub n_paths: Option<usize>,
    pub basis_degree: u32,
    pub seed: u64,
    pub x0: f64,
    pub claim: String,
    pub driver: String,
    /// `regression` or `linear` for `solve-bsde`.
    pub method: String,
    pub tolerance: f64,
    pub theta_grid: ThetaGrid,
    /// `log` or `power`.
    pub utility: String,
    pub delta: f64,
    /// `solve` or `verify` for `hjbi`.
    pub action: String,
    pub newsvendor: NewsvendorSpec,
    pub leader: LeaderOptions,
    pub output: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            market: MarketModel::black_scholes(0.05, 0.2, 1.0, 100),
            n_paths: None,
            basis_degree: 3,
            seed: 1,
            x0: 1.0,
            claim: "optimal-wealth".into(),
            driver: "entropic".into(),
            method: "regression".into(),
            tolerance: 1e-8,
            theta_grid: ThetaGrid::default(),
            utility: "log".into(),
            delta: 0.5,
            action: "verify".into(),
            newsvendor: NewsvendorSpec::default(),
            leader: LeaderOptions::default(),
            output: None,
            csv: None,
        }
    }
}

/// Flag values; `None` leaves the file (or default) value alone.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub r: Option<f64>,
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
    pub jump_lambda: Vec<f64>,
    pub jump_gamma: Vec<f64>,
    pub n_paths: Option<usize>,
    pub basis_degree: Option<u32>,
    pub seed: Option<u64>,
    pub x0: Option<f64>,
    pub claim: Option<String>,
    pub driver: Option<String>,
    pub method: Option<String>,
    pub tolerance: Option<f64>,
    pub theta_lo: Option<f64>,
    pub theta_hi: Option<f64>,
    pub theta_n: Option<usize>,
    pub utility: Option<String>,
    pub delta: Option<f64>,
    pub action: Option<String>,
    pub nv_k: Option<f64>,
    pub nv_cost: Option<f64>,
    pub nv_salvage: Option<f64>,
    pub nv_mean: Option<f64>,
    pub nv_sd: Option<f64>,
    pub nv_delta: Option<f64>,
    pub nv_steps: Option<usize>,
    pub max_sweeps: Option<usize>,
    pub output: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

/// Reads a config file. A previous result record is accepted too: its
/// `config` member is used.
pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
    let (value, replay) = match value {
        serde_json::Value::Object(mut m) if m.contains_key("results") && m.contains_key("config") => {
            (m.remove("config").unwrap_or_default(), true)
        }
        v => (v, false),
    };
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if replay {
        // never overwrite the record being replayed
        cfg.output = None;
        cfg.csv = None;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl RunConfig {
    pub fn apply(&mut self, o: Overrides) -> Result<(), CliError> {
        set(&mut self.market.mu, o.mu.map(Curve::Constant));
        set(&mut self.market.sigma, o.sigma.map(Curve::Constant));
        set(&mut self.market.r, o.r.map(Curve::Constant));
        set(&mut self.market.horizon, o.horizon);
        set(&mut self.market.n_steps, o.n_steps);
        if o.jump_lambda.len() != o.jump_gamma.len() {
            return Err(CliError::Config("--jump-lambda and --jump-gamma must be given the same number of times".into()));
        }
        if !o.jump_lambda.is_empty() {
            self.market.atoms = o
                .jump_lambda
                .iter()
                .zip(&o.jump_gamma)
                .enumerate()
                .map(|(j, (&l, &g))| Atom::new((j + 1) as f64, l, g))
                .collect();
        }
        if o.n_paths.is_some() {
            self.n_paths = o.n_paths;
        }
        set(&mut self.basis_degree, o.basis_degree);
        set(&mut self.seed, o.seed);
        set(&mut self.x0, o.x0);
        set(&mut self.claim, o.claim);
        set(&mut self.driver, o.driver);
        set(&mut self.method, o.method);
        set(&mut self.tolerance, o.tolerance);
        set(&mut self.theta_grid.lo, o.theta_lo);
        set(&mut self.theta_grid.hi, o.theta_hi);
        set(&mut self.theta_grid.n, o.theta_n);
        set(&mut self.utility, o.utility);
        set(&mut self.delta, o.delta);
        set(&mut self.action, o.action);
        let nv = &mut self.newsvendor;
        set(&mut nv.k, o.nv_k);
        set(&mut nv.cost, o.nv_cost);
        set(&mut nv.salvage, o.nv_salvage);
        set(&mut nv.mean, o.nv_mean.map(Curve::Constant));
        set(&mut nv.sd, o.nv_sd.map(Curve::Constant));
        set(&mut nv.delta, o.nv_delta);
        set(&mut nv.n_steps, o.nv_steps);
        set(&mut self.leader.max_sweeps, o.max_sweeps);
        if o.output.is_some() {
            self.output = o.output;
        }
        if o.csv.is_some() {
            self.csv = o.csv;
        }
        if self.n_paths.is_none() {
            self.n_paths = Some(if self.command == "simulate" { 100 } else { 20_000 });
        }
        Ok(())
    }

    pub fn paths(&self) -> usize {
        self.n_paths.unwrap_or(20_000)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !COMMANDS.contains(&self.command.as_str()) {
            return Err(CliError::Config(format!("unknown command {:?}", self.command)));
        }
        let scalars = [
            ("x0", self.x0),
            ("tolerance", self.tolerance),
            ("delta", self.delta),
            ("theta_grid.lo", self.theta_grid.lo),
            ("theta_grid.hi", self.theta_grid.hi),
            ("leader.damping", self.leader.damping),
            ("leader.tolerance", self.leader.tolerance),
        ];
        if let Some((name, v)) = scalars.iter().find(|(_, v)| !v.is_finite()) {
            return Err(CliError::Config(format!("{name} must be finite, got {v}")));
        }
        if !(self.x0 > 0.0) {
            return Err(CliError::Config(format!("x0 must be positive, got {}", self.x0)));
        }
        if !(self.tolerance > 0.0) {
            return Err(CliError::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.paths() == 0 {
            return Err(CliError::Config("n_paths must be positive".into()));
        }
        self.market.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.command == "newsvendor" {
            self.newsvendor.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }
}
