use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use levy_risk::bsde::{solve_linear, solve_regression, Claim, Driver, LinearDriverParams, SolveOptions, Tree};
use levy_risk::hjbi::{solve_first_order, value_closed, verify_default, Ansatz, CandidateValue, FirstOrderSystem, GamePoint, GameSpec};
use levy_risk::maxprinciple::{risk_minimize_quadratic, utility_optimize, Utility};
use levy_risk::newsvendor::{leader_price, profit_shift};
use levy_risk::risk::{check_axioms, rho_dual, rho_static, RiskMeasureSpec, ScenarioFamily};
use levy_risk::{simulate, stochastic_exponential, Curve, Estimate, MarketModel, PathEnsemble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

/// What a command produced: the `results` member and the checks that failed.
pub struct Outcome {
    pub results: Value,
    pub failures: Vec<String>,
}

fn done(results: Value) -> Result<Outcome, CliError> {
    Ok(Outcome { results, failures: vec![] })
}

fn failed_if(bad: bool, what: impl FnOnce() -> String) -> Vec<String> {
    if bad {
        vec![what()]
    } else {
        vec![]
    }
}

fn est(e: &Estimate) -> Value {
    json!({ "mean": e.mean, "std_error": e.std_error })
}

fn write_csv<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut out).map_err(io)?;
    out.flush().map_err(io)
}

fn paths(cfg: &RunConfig) -> Result<PathEnsemble, CliError> {
    Ok(simulate(&cfg.market, cfg.paths(), cfg.seed)?)
}

fn parse_param(spec: &str, name: &str) -> Result<Option<f64>, CliError> {
    match spec.split_once(':') {
        None => Ok(None),
        Some((_, v)) => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("bad parameter in {name} {spec:?}"))),
    }
}

/// Terminal claims by name: `constant:A`, `brownian`, `brownian-square`,
/// `stock`, `call:K`, `put:K`, `optimal-wealth`.
pub fn claim(cfg: &RunConfig, ens: &PathEnsemble) -> Result<Claim, CliError> {
    let name = cfg.claim.split(':').next().unwrap_or("");
    let p = parse_param(&cfg.claim, "claim")?;
    let need = |p: Option<f64>| p.ok_or_else(|| CliError::Config(format!("claim {:?} needs a parameter", cfg.claim)));
    let stock = || -> Result<Vec<f64>, CliError> {
        let m = &cfg.market;
        let gammas: Vec<Curve> = m.atoms.iter().map(|a| a.gamma.clone()).collect();
        let s = stochastic_exponential(ens, &m.mu, &m.sigma, &gammas)?;
        Ok(s.terminal().iter().map(|v| cfg.x0 * v).collect())
    };
    Ok(match name {
        "constant" => Claim::constant(need(p)?),
        "brownian" => Claim::terminal("W(T)", |w, _| w),
        "brownian-square" => Claim::terminal("W(T)^2", |w, _| w * w),
        "stock" => Claim::from_values("S(T)", stock()?),
        "call" => {
            let k = need(p)?;
            Claim::from_values(format!("call {k}"), stock()?.into_iter().map(|s| (s - k).max(0.0)).collect())
        }
        "put" => {
            let k = need(p)?;
            Claim::from_values(format!("put {k}"), stock()?.into_iter().map(|s| (k - s).max(0.0)).collect())
        }
        "optimal-wealth" => {
            let rm = risk_minimize_quadratic(&cfg.market, cfg.x0, ens)?;
            Claim::from_values("optimal terminal wealth", rm.terminal_wealth)
        }
        _ => return Err(CliError::Config(format!("unknown claim {:?}", cfg.claim))),
    })
}

/// Drivers by name: `zero`, `entropic`, `quadratic:A` for `-A z^2 / 2`,
/// `replication` for `-r y - ((mu - r)/sigma) z`.
pub fn driver(cfg: &RunConfig) -> Result<Driver, CliError> {
    let name = cfg.driver.split(':').next().unwrap_or("");
    let p = parse_param(&cfg.driver, "driver")?;
    Ok(match name {
        "zero" => Driver::zero(),
        "entropic" => Driver::entropic(),
        "quadratic" => {
            let a = p.ok_or_else(|| CliError::Config("driver quadratic needs a coefficient".into()))?;
            if a < 0.0 {
                return Err(CliError::Config(format!("driver quadratic:{a} is not concave")));
            }
            Driver::new(format!("quadratic {a}"), move |i| -0.5 * a * i.z * i.z).independent_of_y().concave()
        }
        "replication" => {
            let m = &cfg.market;
            Driver::linear(&replication(m), &m.lambdas(), &m.grid())?
        }
        _ => return Err(CliError::Config(format!("unknown driver {:?}", cfg.driver))),
    })
}

fn replication(m: &MarketModel) -> LinearDriverParams {
    let grid = m.grid();
    let beta = Curve::sample(&grid, |t| -(m.mu.at(t) - m.r.at(t)) / m.sigma.at(t)).unwrap_or_default();
    LinearDriverParams {
        phi: Curve::Constant(0.0),
        alpha: m.r.map(|r| -r),
        beta,
        gamma_coef: vec![Curve::Constant(0.0); m.atoms.len()],
    }
}

fn opts(cfg: &RunConfig, store_paths: bool) -> SolveOptions {
    SolveOptions { basis_degree: cfg.basis_degree, store_paths, stop_step: None }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cfg.command.as_str() {
        "simulate" => cmd_simulate(cfg),
        "solve-bsde" => cmd_solve_bsde(cfg),
        "risk" => cmd_risk(cfg),
        "dual-risk" => cmd_dual_risk(cfg),
        "utility" => cmd_utility(cfg),
        "risk-min" => cmd_risk_min(cfg),
        "hjbi" => cmd_hjbi(cfg),
        "newsvendor" => cmd_newsvendor(cfg),
        "verify" => cmd_verify(cfg),
        other => Err(CliError::Config(format!("unknown command {other:?}"))),
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let ens = paths(cfg)?;
    match &cfg.csv {
        Some(p) => write_csv(p, |out| ens.write_csv(out))?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            ens.write_csv(&mut lock).and_then(|_| lock.flush()).map_err(|e| CliError::Io(format!("stdout: {e}")))?;
        }
    }
    let w = Estimate::from_iter((0..ens.n_paths()).map(|p| ens.path(p).terminal_brownian()));
    let counts: Vec<Value> = (0..ens.n_atoms())
        .map(|j| est(&Estimate::from_iter((0..ens.n_paths()).map(|p| ens.path(p).terminal_jumps(j)))))
        .collect();
    done(json!({
        "n_paths": ens.n_paths(),
        "n_steps": ens.n_steps(),
        "n_atoms": ens.n_atoms(),
        "terminal_brownian": est(&w),
        "terminal_counts": counts,
    }))
}

fn cmd_solve_bsde(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let ens = paths(cfg)?;
    let claim = claim(cfg, &ens)?;
    let o = opts(cfg, cfg.csv.is_some());
    let sol = match cfg.method.as_str() {
        "regression" => solve_regression(&driver(cfg)?, &claim, &ens, &o)?,
        "linear" => {
            if cfg.driver != "replication" {
                return Err(CliError::Config("method linear needs driver replication".into()));
            }
            solve_linear(&replication(&cfg.market), &claim, &ens, &o)?
        }
        m => return Err(CliError::Config(format!("unknown method {m:?}"))),
    };
    if let Some(p) = &cfg.csv {
        write_csv(p, |out| sol.write_csv(out))?;
    }
    done(json!({
        "claim": claim.label,
        "driver": cfg.driver,
        "method": sol.method,
        "y0": { "mean": sol.y0, "std_error": sol.y0_std_error },
        "degenerate": sol.degenerate,
        "fixed_point_residual": sol.fixed_point_residual,
    }))
}

fn risk_spec(cfg: &RunConfig) -> Result<RiskMeasureSpec, CliError> {
    let d = driver(cfg)?;
    let label = d.label.clone();
    Ok(RiskMeasureSpec::new(d, label)?)
}

fn cmd_risk(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let ens = paths(cfg)?;
    let claim = claim(cfg, &ens)?;
    let spec = risk_spec(cfg)?;
    let rho = rho_static(&spec, &claim, &ens, &opts(cfg, false))?;
    done(json!({ "claim": claim.label, "measure": spec.label, "rho": est(&rho) }))
}

fn cmd_dual_risk(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let g = &cfg.theta_grid;
    if g.n == 0 || g.lo > g.hi {
        return Err(CliError::Config(format!("bad scenario grid [{}, {}] x {}", g.lo, g.hi, g.n)));
    }
    let ens = paths(cfg)?;
    let claim = claim(cfg, &ens)?;
    let family = ScenarioFamily::diffusion_grid(g.lo, g.hi, g.n, cfg.market.atoms.len());
    let res = rho_dual(&claim, &family, &ens)?;
    let per: Vec<Value> = family
        .scenarios
        .iter()
        .zip(&res.values)
        .map(|(s, v)| json!({ "theta0": s.theta0.at(0.0), "mean": v.mean, "std_error": v.std_error }))
        .collect();
    done(json!({
        "claim": claim.label,
        "value": res.value,
        "std_error": res.std_error,
        "argmax_theta0": res.scenario.theta0.at(0.0),
        "scenarios": per,
    }))
}

fn cmd_utility(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let u = match cfg.utility.as_str() {
        "log" => Utility::Log,
        "power" => Utility::Power { delta: cfg.delta },
        other => return Err(CliError::Config(format!("unknown utility {other:?}"))),
    };
    let ens = paths(cfg)?;
    let res = utility_optimize(u, &cfg.market, cfg.x0, &ens)?;
    let budget_ok = res.budget.within(cfg.x0, 3.0);
    let mut results = serde_json::to_value(&res).map_err(|e| CliError::Io(e.to_string()))?;
    results["budget_within_3se"] = json!(budget_ok);
    let failures = failed_if(!budget_ok, || format!("budget {:?} is not within 3 s.e. of x0 = {}", res.budget, cfg.x0));
    Ok(Outcome { results, failures })
}

fn cmd_risk_min(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let ens = paths(cfg)?;
    let res = risk_minimize_quadratic(&cfg.market, cfg.x0, &ens)?;
    let spec = GameSpec::new(cfg.market.clone())?;
    let game = value_closed(&spec, &GamePoint::new(0.0, cfg.x0, 1.0))?;
    let agree = res.minimal_risk_mc.within(res.minimal_risk_analytic, 3.0);
    let mut results = serde_json::to_value(&res).map_err(|e| CliError::Io(e.to_string()))?;
    results["game_value"] = json!(game);
    results["mc_within_3se"] = json!(agree);
    let failures = failed_if(!agree, || {
        format!("Monte Carlo risk {:?} is not within 3 s.e. of {}", res.minimal_risk_mc, res.minimal_risk_analytic)
    });
    Ok(Outcome { results, failures })
}

fn cmd_hjbi(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = GameSpec::new(cfg.market.clone())?;
    match cfg.action.as_str() {
        "verify" => {
            let rep = verify_default(&spec, cfg.tolerance)?;
            let failures = [&rep.investor_condition, &rep.market_condition, &rep.equality_condition]
                .into_iter()
                .filter(|c| !c.passed)
                .map(|c| format!("{} condition violated by {:e}", c.condition, c.worst_violation))
                .collect();
            Ok(Outcome { results: serde_json::to_value(&rep).map_err(|e| CliError::Io(e.to_string()))?, failures })
        }
        "solve" => {
            let phi = if spec.market.has_jumps() {
                Ansatz::from_saddle(&spec, FirstOrderSystem::Stationarity)?
            } else {
                Ansatz::closed_form(&spec)?
            };
            let grid = spec.market.grid();
            let mut rows = Vec::with_capacity(grid.len());
            for &s in &grid {
                let sol = solve_first_order(&spec, s, FirstOrderSystem::Stationarity)?;
                rows.push((s, sol, phi.kappa(s)));
            }
            if let Some(p) = &cfg.csv {
                write_csv(p, |out| {
                    write!(out, "s,theta0")?;
                    for j in 0..spec.market.atoms.len() {
                        write!(out, ",theta1_{j}")?;
                    }
                    writeln!(out, ",w,kappa,residual")?;
                    for (s, sol, k) in &rows {
                        write!(out, "{s:.16e},{:.16e}", sol.controls.theta0)?;
                        for t1 in &sol.controls.theta1 {
                            write!(out, ",{t1:.16e}")?;
                        }
                        writeln!(out, ",{:.16e},{k:.16e},{:.16e}", sol.controls.w, sol.residual)?;
                    }
                    Ok(())
                })?;
            }
            let worst = rows.iter().fold(0.0f64, |a, r| a.max(r.1.residual));
            let first = &rows[0].1;
            done(json!({
                "candidate": phi.label,
                "controls_at_0": first.controls,
                "max_residual": worst,
                "kappa_at_0": rows[0].2,
                "value_at_0": phi.value(0.0, cfg.x0, 1.0),
                "grid_points": rows.len(),
            }))
        }
        other => Err(CliError::Config(format!("unknown hjbi action {other:?}, expected solve or verify"))),
    }
}

fn cmd_newsvendor(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = &cfg.newsvendor;
    let sol = leader_price(spec, &cfg.leader)?;
    if let Some(p) = &cfg.csv {
        write_csv(p, |out| sol.write_csv(out))?;
    }
    let shifts: Vec<Value> = [-0.25, 0.25]
        .iter()
        .map(|&d| {
            let s = profit_shift(spec, &sol, d);
            json!({ "shift": s.shift, "profit": s.profit, "dominated": s.dominated, "reason": s.reason })
        })
        .collect();
    let leader = sol.max_leader_residual();
    let mut failures = failed_if(sol.sales_residual > 1e-8, || format!("sales residual {:e}", sol.sales_residual));
    failures.extend(failed_if(leader > 1e-8, || format!("leader stationarity residual {leader:e}")));
    Ok(Outcome {
        results: json!({
            "profit": sol.profit,
            "w_at_0": sol.w_hat[0],
            "q_at_0": sol.q_hat[0],
            "r_at_0": sol.r_hat[0],
            "y_at_0": sol.y[0],
            "lambda_at_t": sol.lambda.last(),
            "foc_residual": sol.foc_residual,
            "sales_residual": sol.sales_residual,
            "integral_residual": sol.integral_residual,
            "max_leader_residual": leader,
            "boundary_steps": sol.boundary_steps.len(),
            "sweeps": sol.sweeps,
            "history": sol.history,
            "shifts": shifts,
        }),
        failures,
    })
}

fn check(name: &str, passed: bool, detail: String) -> Value {
    json!({ "check": name, "passed": passed, "detail": detail })
}

/// A quick battery of self-checks on the configured market.
fn cmd_verify(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut checks = Vec::new();
    let m = &cfg.market;
    let ens = paths(cfg)?;
    let spec = GameSpec::new(m.clone())?;

    let gammas: Vec<Curve> = m.atoms.iter().map(|a| a.gamma.clone()).collect();
    let g = stochastic_exponential(&ens, &Curve::Constant(0.0), &m.sigma, &gammas)?;
    let e = Estimate::from_samples(g.terminal());
    checks.push(check("martingale", e.within(1.0, 3.0), format!("E[exp] = {} +- {}", e.mean, e.std_error)));

    let first = solve_first_order(&spec, 0.0, FirstOrderSystem::Stationarity)?;
    checks.push(check("first-order", first.residual <= 1e-10, format!("residual {:e}", first.residual)));

    let rep = verify_default(&spec, cfg.tolerance)?;
    checks.push(check(
        "hjbi",
        rep.passed,
        format!(
            "worst (i) {:e} (ii) {:e} (iii) {:e}",
            rep.investor_condition.worst_violation, rep.market_condition.worst_violation, rep.equality_condition.worst_violation
        ),
    ));

    if !m.has_jumps() {
        let rm = risk_minimize_quadratic(m, cfg.x0, &ens)?;
        let v = value_closed(&spec, &GamePoint::new(0.0, cfg.x0, 1.0))?;
        let agree = (rm.minimal_risk_analytic - v).abs() <= 1e-10 * v.abs().max(1.0);
        checks.push(check("closed-forms", agree, format!("risk-min {} game {v}", rm.minimal_risk_analytic)));
        checks.push(check(
            "risk-min-mc",
            rm.minimal_risk_mc.within(rm.minimal_risk_analytic, 3.0),
            format!("{} +- {}", rm.minimal_risk_mc.mean, rm.minimal_risk_mc.std_error),
        ));
        let u = utility_optimize(Utility::Log, m, cfg.x0, &ens)?;
        checks.push(check("budget", u.budget.within(cfg.x0, 3.0), format!("{} +- {}", u.budget.mean, u.budget.std_error)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tree = Tree::binomial_with_jump(0.1, 5, 1.0)?;
    let leaves = tree.n_nodes(5);
    let claims: Vec<Vec<f64>> = (0..3).map(|_| (0..leaves).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let ax = check_axioms(&RiskMeasureSpec::entropic(), &claims, &[0.25, 0.5, 0.75], &tree)?;
    let failed: Vec<&str> = ax.axioms.iter().filter(|a| !a.passed).map(|a| a.axiom.as_str()).collect();
    checks.push(check("tree-axioms", ax.passed, format!("failed: {failed:?}")));

    let failures: Vec<String> = checks
        .iter()
        .filter(|c| c["passed"] != json!(true))
        .map(|c| format!("{}: {}", c["check"].as_str().unwrap_or(""), c["detail"].as_str().unwrap_or("")))
        .collect();
    Ok(Outcome { results: json!({ "checks": checks, "passed": failures.is_empty() }), failures })
}
