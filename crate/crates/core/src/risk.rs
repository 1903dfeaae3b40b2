//! Convex risk measures induced by BSDEs: static and dynamic evaluation,
//! an axiom test battery and the dual representation over scenario grids.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_regression, BsdeSolution, Claim, Driver, SolveOptions, Tree, TreeSolution};
use crate::error::{Error, Result};
use crate::market::{girsanov_density, PathEnsemble, Scenario};
use crate::numerics::Estimate;

/// Node-wise slack for identities that hold exactly in real arithmetic.
pub const TREE_TOLERANCE: f64 = 1e-12;

/// A risk measure `rho(F) = -Y(0)` given by a driver that ignores `y`.
#[derive(Debug, Clone)]
pub struct RiskMeasureSpec {
    pub driver: Driver,
    pub label: String,
}

impl RiskMeasureSpec {
    pub fn new(driver: Driver, label: impl Into<String>) -> Result<Self> {
        if driver.depends_on_y {
            return Err(Error::InvalidArgument(format!(
                "risk driver {} must not depend on y",
                driver.label
            )));
        }
        Ok(RiskMeasureSpec { driver, label: label.into() })
    }

    /// `g(z) = -z^2 / 2`.
    pub fn entropic() -> Self {
        RiskMeasureSpec { driver: Driver::entropic(), label: "entropic".into() }
    }
}

/// `rho(F) = -Y(0)` by regression Monte Carlo, with the standard error of `Y(0)`.
pub fn rho_static(spec: &RiskMeasureSpec, claim: &Claim, paths: &PathEnsemble, opts: &SolveOptions) -> Result<Estimate> {
    let sol = solve_regression(&spec.driver, claim, paths, opts)?;
    Ok(Estimate { mean: -sol.y0, std_error: sol.y0_std_error })
}

/// `rho(F) = -Y(0)` on a tree, from leaf values at full depth.
pub fn rho_static_tree(spec: &RiskMeasureSpec, tree: &Tree, terminal: &[f64]) -> Result<f64> {
    Ok(-tree.solve(&spec.driver, terminal, tree.n_steps)?.y0)
}

fn stop_step(grid: &[f64], tau: f64) -> Result<usize> {
    let dt = grid[1] - grid[0];
    let s = (tau / dt).round();
    if !(s >= 0.0 && (s as usize) < grid.len()) || (s * dt - tau).abs() > 1e-9 * dt.max(1.0) {
        return Err(Error::GridMismatch(format!("stopping time {tau} is not a grid point")));
    }
    Ok(s as usize)
}

/// Dynamic risk `rho_t(xi, tau) = -Y(t)` on every path and step.
#[derive(Debug, Clone)]
pub struct DynamicRisk {
    pub tau_step: usize,
    pub y0_std_error: f64,
    solution: BsdeSolution,
}

impl DynamicRisk {
    pub fn at(&self, path: usize, step: usize) -> f64 {
        -self.solution.y(path, step)
    }

    pub fn step(&self, step: usize) -> Vec<f64> {
        self.solution.y_step(step).iter().map(|y| -y).collect()
    }

    pub fn rho0(&self) -> f64 {
        -self.solution.y0
    }

    pub fn solution(&self) -> &BsdeSolution {
        &self.solution
    }
}

/// Dynamic risk of `xi` (which must be known at `tau`) by regression.
/// After `tau` the process is frozen at `-xi`.
pub fn rho_dynamic(
    spec: &RiskMeasureSpec,
    xi: &Claim,
    tau: f64,
    paths: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<DynamicRisk> {
    let tau_step = stop_step(paths.grid(), tau)?;
    let opts = SolveOptions { stop_step: Some(tau_step), store_paths: true, ..opts.clone() };
    let solution = solve_regression(&spec.driver, xi, paths, &opts)?;
    Ok(DynamicRisk { tau_step, y0_std_error: solution.y0_std_error, solution })
}

/// Dynamic risk on a tree: `rho[d][node]` for every depth, from `xi` given at depth `tau`.
pub fn rho_dynamic_tree(spec: &RiskMeasureSpec, tree: &Tree, xi: &[f64], tau: usize) -> Result<Vec<Vec<f64>>> {
    let sol = tree.solve(&spec.driver, xi, tau)?;
    let mut out: Vec<Vec<f64>> = sol.y.iter().map(|lvl| lvl.iter().map(|y| -y).collect()).collect();
    for d in tau + 1..=tree.n_steps {
        let lvl = (0..tree.n_nodes(d)).map(|i| -xi[tree.ancestor(i, d, tau)]).collect();
        out.push(lvl);
    }
    Ok(out)
}

/// Where an axiom check came closest to (or went past) failing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub depth: usize,
    pub node: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomCheck {
    pub axiom: String,
    pub passed: bool,
    /// Largest violation seen; non-positive when the inequality holds everywhere.
    pub worst_violation: f64,
    pub location: Option<Location>,
    pub checks: usize,
    /// Reason the axiom was not tested, if it was not.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl AxiomCheck {
    fn new(axiom: &str) -> Self {
        AxiomCheck {
            axiom: axiom.into(),
            passed: true,
            worst_violation: f64::NEG_INFINITY,
            location: None,
            checks: 0,
            skipped: None,
        }
    }

    fn skip(axiom: &str, why: &str) -> Self {
        AxiomCheck { skipped: Some(why.into()), ..AxiomCheck::new(axiom) }
    }

    /// Records `violation` (positive means broken) against `tol`.
    fn record(&mut self, violation: f64, tol: f64, at: impl FnOnce() -> Location) {
        self.checks += 1;
        if violation > self.worst_violation || violation.is_nan() {
            self.worst_violation = violation;
            self.location = Some(at());
        }
        if violation > tol || violation.is_nan() {
            self.passed = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub measure: String,
    pub tolerance: String,
    pub axioms: Vec<AxiomCheck>,
    pub passed: bool,
}

impl AxiomReport {
    fn finish(measure: &str, tolerance: String, axioms: Vec<AxiomCheck>) -> Self {
        let passed = axioms.iter().all(|a| a.passed);
        AxiomReport { measure: measure.into(), tolerance, axioms, passed }
    }

    pub fn get(&self, axiom: &str) -> Option<&AxiomCheck> {
        self.axioms.iter().find(|a| a.axiom == axiom)
    }
}

fn tol(a: f64, b: f64) -> f64 {
    TREE_TOLERANCE * (1.0 + a.abs().max(b.abs()))
}

fn vanishes_at_zero(driver: &Driver, tree: &Tree) -> bool {
    let k = vec![0.0; tree.n_atoms()];
    (0..tree.n_steps).all(|s| driver.at(s as f64 * tree.dt, 0.0, 0.0, &k) == 0.0)
}

/// Node-wise axiom battery on a tree for claims given as leaf values at full depth.
///
/// Convexity is tested for every pair of claims and every weight in `lambdas`,
/// monotonicity on `min(F_i, F_j) <= F_i`, translation for a fixed set of cash
/// shifts, consistency for every pair of stopping depths `S <= tau`, and the
/// zero-one law on the events fixed by the first branch.
pub fn check_axioms(spec: &RiskMeasureSpec, claims: &[Vec<f64>], lambdas: &[f64], tree: &Tree) -> Result<AxiomReport> {
    let n = tree.n_steps;
    let leaves = tree.n_nodes(n);
    if let Some(c) = claims.iter().position(|c| c.len() != leaves) {
        return Err(Error::GridMismatch(format!("claim {c} does not have {leaves} leaf values")));
    }
    if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("convex weight {l} outside [0, 1]")));
    }
    let g = &spec.driver;
    let sols: Vec<TreeSolution> = claims.iter().map(|c| tree.solve(g, c, n)).collect::<Result<_>>()?;
    let each_node = |a: &TreeSolution, mut f: Box<dyn FnMut(usize, usize, f64) + '_>| {
        for (d, lvl) in a.y.iter().enumerate() {
            for (i, &v) in lvl.iter().enumerate() {
                f(d, i, v);
            }
        }
    };

    let mut convexity = if g.concave {
        AxiomCheck::new("convexity")
    } else {
        AxiomCheck::skip("convexity", "driver not declared concave")
    };
    if g.concave {
        for i in 0..claims.len() {
            for j in i + 1..claims.len() {
                for &l in lambdas {
                    let mix: Vec<f64> = claims[i].iter().zip(&claims[j]).map(|(a, b)| l * a + (1.0 - l) * b).collect();
                    let sm = tree.solve(g, &mix, n)?;
                    // rho(mix) <= l rho(F_i) + (1-l) rho(F_j)  <=>  Y_mix >= l Y_i + (1-l) Y_j
                    each_node(&sm, Box::new(|d, k, ym| {
                        let rhs = l * sols[i].y[d][k] + (1.0 - l) * sols[j].y[d][k];
                        convexity.record(rhs - ym, tol(rhs, ym), || Location {
                            depth: d,
                            node: k,
                            detail: format!("claims ({i}, {j}), lambda {l}"),
                        });
                    }));
                }
            }
        }
    }

    let mut monotonicity = AxiomCheck::new("monotonicity");
    for i in 0..claims.len() {
        for j in 0..claims.len() {
            if i == j {
                continue;
            }
            let lower: Vec<f64> = claims[i].iter().zip(&claims[j]).map(|(a, b)| a.min(*b)).collect();
            let sl = tree.solve(g, &lower, n)?;
            each_node(&sl, Box::new(|d, k, yl| {
                let yi = sols[i].y[d][k];
                monotonicity.record(yl - yi, tol(yl, yi), || Location {
                    depth: d,
                    node: k,
                    detail: format!("min(F_{i}, F_{j}) against F_{i}"),
                });
            }));
        }
    }

    let mut translation = AxiomCheck::new("translation");
    for (i, c) in claims.iter().enumerate() {
        for &a in &[-1.5, 0.25, 2.0] {
            let shifted: Vec<f64> = c.iter().map(|v| v + a).collect();
            let ss = tree.solve(g, &shifted, n)?;
            each_node(&ss, Box::new(|d, k, ys| {
                let want = sols[i].y[d][k] + a;
                translation.record((ys - want).abs(), tol(ys, want), || Location {
                    depth: d,
                    node: k,
                    detail: format!("claim {i} shifted by {a}"),
                });
            }));
        }
    }

    let mut consistency = AxiomCheck::new("consistency");
    for (i, c) in claims.iter().enumerate() {
        for tau in 1..=n {
            let xi = tree.conditional_expectation(c, n, tau);
            let outer = tree.solve(g, &xi, tau)?;
            for s in 0..=tau {
                // rho_t(xi, tau) = rho_t(-rho_S(xi, tau), S) for t <= S
                let inner = tree.solve(g, &outer.y[s], s)?;
                for d in 0..=s {
                    for (k, (&a, &b)) in inner.y[d].iter().zip(&outer.y[d]).enumerate() {
                        consistency.record((a - b).abs(), tol(a, b), || Location {
                            depth: d,
                            node: k,
                            detail: format!("claim {i}, tau {tau}, S {s}"),
                        });
                    }
                }
            }
        }
    }

    let zero_one = if vanishes_at_zero(g, tree) {
        let mut chk = AxiomCheck::new("zero_one_law");
        let b = tree.branching();
        for (i, c) in claims.iter().enumerate() {
            for first in 0..b {
                let ind = |d: usize, k: usize| if tree.ancestor(k, d, 1) == first { 1.0 } else { 0.0 };
                let masked: Vec<f64> = c.iter().enumerate().map(|(k, v)| ind(n, k) * v).collect();
                let sm = tree.solve(g, &masked, n)?;
                for d in 1..=n {
                    for (k, &ym) in sm.y[d].iter().enumerate() {
                        let want = ind(d, k) * sols[i].y[d][k];
                        chk.record((ym - want).abs(), tol(ym, want), || Location {
                            depth: d,
                            node: k,
                            detail: format!("claim {i}, event first branch = {first}"),
                        });
                    }
                }
            }
        }
        chk
    } else {
        AxiomCheck::skip("zero_one_law", "driver does not vanish at z = k = 0")
    };

    Ok(AxiomReport::finish(
        &spec.label,
        format!("{TREE_TOLERANCE:e} relative per node"),
        vec![convexity, monotonicity, translation, consistency, zero_one],
    ))
}

/// Monte Carlo version of the axiom battery on `rho(0)`, with every
/// inequality allowed three combined standard errors of slack. All
/// evaluations share the ensemble.
pub fn check_axioms_mc(
    spec: &RiskMeasureSpec,
    claims: &[Claim],
    lambdas: &[f64],
    paths: &PathEnsemble,
    opts: &SolveOptions,
) -> Result<AxiomReport> {
    let opts = SolveOptions { store_paths: false, ..opts.clone() };
    let values: Vec<Vec<f64>> = claims.iter().map(|c| c.evaluate(paths)).collect::<Result<_>>()?;
    let rho = |v: Vec<f64>| rho_static(spec, &Claim::from_values("axiom probe", v), paths, &opts);
    let base: Vec<Estimate> = values.iter().map(|v| rho(v.clone())).collect::<Result<_>>()?;
    let se = |a: &Estimate, b: &Estimate| 3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    let at0 = |detail: String| move || Location { depth: 0, node: 0, detail };

    let mut convexity = if spec.driver.concave {
        AxiomCheck::new("convexity")
    } else {
        AxiomCheck::skip("convexity", "driver not declared concave")
    };
    let mut monotonicity = AxiomCheck::new("monotonicity");
    for i in 0..values.len() {
        for j in 0..values.len() {
            if i == j {
                continue;
            }
            if spec.driver.concave && i < j {
                for &l in lambdas {
                    let mix = values[i].iter().zip(&values[j]).map(|(a, b)| l * a + (1.0 - l) * b).collect();
                    let rm = rho(mix)?;
                    let rhs = l * base[i].mean + (1.0 - l) * base[j].mean;
                    convexity.record(rm.mean - rhs, se(&rm, &base[i]).max(se(&rm, &base[j])), at0(format!("claims ({i}, {j}), lambda {l}")));
                }
            }
            let lower = values[i].iter().zip(&values[j]).map(|(a, b)| a.min(*b)).collect();
            let rl = rho(lower)?;
            monotonicity.record(base[i].mean - rl.mean, se(&rl, &base[i]), at0(format!("min(F_{i}, F_{j}) against F_{i}")));
        }
    }
    let mut translation = AxiomCheck::new("translation");
    for (i, v) in values.iter().enumerate() {
        for &a in &[-1.5, 0.25, 2.0] {
            let rs = rho(v.iter().map(|x| x + a).collect())?;
            translation.record((rs.mean - (base[i].mean - a)).abs(), se(&rs, &base[i]), at0(format!("claim {i} shifted by {a}")));
        }
    }
    Ok(AxiomReport::finish(
        &spec.label,
        "3 standard errors".into(),
        vec![convexity, monotonicity, translation],
    ))
}

type PenaltyFn = dyn Fn(&Scenario) -> f64 + Send + Sync;

/// Penalty `alpha(Q)` of the dual representation.
#[derive(Clone, Default)]
pub enum Penalty {
    /// Relative entropy `E[M log M]`, estimated on the shared ensemble.
    #[default]
    Entropic,
    Custom(Arc<PenaltyFn>),
}

impl fmt::Debug for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Penalty::Entropic => write!(f, "Entropic"),
            Penalty::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioFamily {
    pub scenarios: Vec<Scenario>,
    pub penalty: Penalty,
}

impl ScenarioFamily {
    pub fn entropic(scenarios: Vec<Scenario>) -> Self {
        ScenarioFamily { scenarios, penalty: Penalty::Entropic }
    }

    /// Constant diffusion scenarios `theta0 = lo + i (hi - lo) / (n - 1)`.
    pub fn diffusion_grid(lo: f64, hi: f64, n: usize, n_atoms: usize) -> Self {
        let scenarios = (0..n)
            .map(|i| {
                let th = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
                Scenario::diffusion(th, n_atoms)
            })
            .collect();
        ScenarioFamily::entropic(scenarios)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DualResult {
    pub value: f64,
    pub std_error: f64,
    /// First index attaining the maximum.
    pub argmax: usize,
    pub scenario: Scenario,
    /// `E_Q[-X] - alpha(Q)` for every scenario in family order.
    pub values: Vec<Estimate>,
}

/// `max_theta E[M_theta(T) (-X)] - alpha(theta)` over a finite family.
pub fn rho_dual(claim: &Claim, family: &ScenarioFamily, paths: &PathEnsemble) -> Result<DualResult> {
    if family.scenarios.is_empty() {
        return Err(Error::InvalidArgument("scenario family is empty".into()));
    }
    let x = claim.evaluate(paths)?;
    let mut values = Vec::with_capacity(family.scenarios.len());
    for sc in &family.scenarios {
        let m = girsanov_density(paths, sc)?;
        let mt = m.terminal();
        let est = match &family.penalty {
            Penalty::Entropic => Estimate::from_iter(mt.iter().zip(&x).map(|(&m, &x)| m * (-x - m.ln()))),
            Penalty::Custom(f) => {
                let e = Estimate::from_iter(mt.iter().zip(&x).map(|(&m, &x)| -m * x));
                Estimate { mean: e.mean - f(sc), std_error: e.std_error }
            }
        };
        values.push(est);
    }
    let mut argmax = 0;
    for (i, v) in values.iter().enumerate() {
        if v.mean > values[argmax].mean {
            argmax = i;
        }
    }
    Ok(DualResult {
        value: values[argmax].mean,
        std_error: values[argmax].std_error,
        argmax,
        scenario: family.scenarios[argmax].clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate, MarketModel};

    #[test]
    fn rejects_y_dependent_drivers() {
        let d = Driver::new("y", |i| i.y);
        assert!(RiskMeasureSpec::new(d, "bad").is_err());
    }

    #[test]
    fn zero_claim_has_zero_risk_and_cash_is_minus_cash() {
        let ens = simulate(&MarketModel::black_scholes(0.05, 0.2, 1.0, 10), 20_000, 3).unwrap();
        let spec = RiskMeasureSpec::entropic();
        let opts = SolveOptions::default();
        assert_eq!(rho_static(&spec, &Claim::constant(0.0), &ens, &opts).unwrap().mean, 0.0);
        // Z picks up regression noise from a * dB, which the quadratic driver
        // turns into a small upward bias of order basis * steps / paths
        let r = rho_static(&spec, &Claim::constant(1.0), &ens, &opts).unwrap();
        assert!(r.mean + 1.0 >= 0.0 && r.mean + 1.0 < 5e-3, "{}", r.mean);
    }

    #[test]
    fn dynamic_risk_at_tau_is_minus_xi() {
        let ens = simulate(&MarketModel::black_scholes(0.05, 0.2, 1.0, 10), 1000, 5).unwrap();
        let xi = Claim::path("w(0.5)", |p| p.brownian(5));
        let r = rho_dynamic(&RiskMeasureSpec::entropic(), &xi, 0.5, &ens, &SolveOptions::default()).unwrap();
        for p in 0..1000 {
            assert_eq!(r.at(p, 5), -ens.path(p).brownian(5));
            assert_eq!(r.at(p, 8), r.at(p, 5));
        }
        assert!(rho_dynamic(&RiskMeasureSpec::entropic(), &xi, 0.55, &ens, &SolveOptions::default()).is_err());
    }

    #[test]
    fn zero_driver_dynamic_risk_is_minus_conditional_expectation() {
        let tree = Tree::binomial(0.25, 4).unwrap();
        let xi = tree.values_from(4, |bp| bp.iter().map(|&c| c as f64 * 1.5 - 0.3).product());
        let spec = RiskMeasureSpec::new(Driver::zero(), "zero").unwrap();
        let rho = rho_dynamic_tree(&spec, &tree, &xi, 4).unwrap();
        for d in 0..=4 {
            let ce = tree.conditional_expectation(&xi, 4, d);
            for (a, b) in rho[d].iter().zip(&ce) {
                assert!((a + b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn axioms_hold_for_the_entropic_driver() {
        let tree = Tree::binomial_with_jump(1.0 / 6.0, 6, 0.5).unwrap();
        let spec = RiskMeasureSpec::entropic();
        let f1 = tree.values_from(6, |bp| (bp.iter().sum::<usize>() as f64 * 0.37).sin());
        let f2 = tree.values_from(6, |bp| (bp[0] as f64 - bp[5] as f64) * 0.3);
        let rep = check_axioms(&spec, &[f1, f2], &[0.0, 0.5, 1.0], &tree).unwrap();
        assert!(rep.passed, "{rep:#?}");
        assert!(rep.get("zero_one_law").unwrap().skipped.is_none());
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("worst_violation"));
    }

    #[test]
    fn non_concave_driver_breaks_convexity() {
        let tree = Tree::binomial(0.25, 3).unwrap();
        let spec = RiskMeasureSpec::new(Driver::new("convex", |i| 0.5 * i.z * i.z).independent_of_y().concave(), "lying").unwrap();
        let f1 = tree.values_from(3, |bp| bp[0] as f64);
        let f2 = tree.values_from(3, |bp| -(bp[0] as f64));
        let rep = check_axioms(&spec, &[f1, f2], &[0.5], &tree).unwrap();
        assert!(!rep.get("convexity").unwrap().passed);
    }

    #[test]
    fn dual_identity_scenario_is_minus_mean() {
        let ens = simulate(&MarketModel::black_scholes(0.05, 0.2, 1.0, 10), 2000, 8).unwrap();
        let claim = Claim::terminal("w", |w, _| 1.0 + w);
        let fam = ScenarioFamily::entropic(vec![Scenario::identity(0)]);
        let r = rho_dual(&claim, &fam, &ens).unwrap();
        let x = claim.evaluate(&ens).unwrap();
        let want = -x.iter().sum::<f64>() / 2000.0;
        assert!((r.value - want).abs() < 1e-12);
        let cash = rho_dual(&Claim::constant(3.0), &ScenarioFamily::diffusion_grid(-1.0, 1.0, 5, 0), &ens).unwrap();
        assert_eq!(cash.argmax, 2);
        assert!((cash.value + 3.0).abs() < 1e-12);
    }
}
