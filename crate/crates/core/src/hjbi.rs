//! The entropic zero-sum game between the market (choosing a measure
//! `theta`) and the investor (choosing an amount `w` in the risky asset):
//! generator, first-order conditions, closed-form value and an HJBI checker.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::numerics::integrate;

/// A point `(s, x, m)` of the solvency region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GamePoint {
    pub s: f64,
    pub x: f64,
    pub m: f64,
}

impl GamePoint {
    pub fn new(s: f64, x: f64, m: f64) -> Self {
        GamePoint { s, x, m }
    }
}

/// Control values: `theta0`, one `theta1` per atom and the amount `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameControls {
    pub theta0: f64,
    pub theta1: Vec<f64>,
    pub w: f64,
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    pub market: MarketModel,
}

impl GameSpec {
    pub fn new(market: MarketModel) -> Result<Self> {
        market.validate()?;
        Ok(GameSpec { market })
    }

    fn n_atoms(&self) -> usize {
        self.market.atoms.len()
    }

    fn check_point(&self, pt: &GamePoint) -> Result<()> {
        let ok = pt.s >= 0.0 && pt.s <= self.market.horizon && pt.x > 0.0 && pt.m > 0.0 && pt.x.is_finite() && pt.m.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!("point ({}, {}, {}) is outside the solvency region", pt.s, pt.x, pt.m)));
        }
        Ok(())
    }

    fn check_controls(&self, c: &GameControls) -> Result<()> {
        if c.theta1.len() != self.n_atoms() {
            return Err(Error::GridMismatch(format!("{} jump controls for {} atoms", c.theta1.len(), self.n_atoms())));
        }
        if let Some(t) = c.theta1.iter().find(|&&t| !(t > -1.0)) {
            return Err(Error::InvalidArgument(format!("theta1 = {t} must exceed -1")));
        }
        Ok(())
    }
}

/// A candidate value function with the partial derivatives the generator needs.
/// The defaults are central differences.
pub trait CandidateValue {
    fn value(&self, s: f64, x: f64, m: f64) -> f64;

    fn fd_step(&self) -> f64 {
        1e-4
    }

    fn phi_s(&self, s: f64, x: f64, m: f64) -> f64 {
        let h = self.fd_step();
        (self.value(s + h, x, m) - self.value(s - h, x, m)) / (2.0 * h)
    }
    fn phi_x(&self, s: f64, x: f64, m: f64) -> f64 {
        let h = self.fd_step() * x.abs().max(1.0);
        (self.value(s, x + h, m) - self.value(s, x - h, m)) / (2.0 * h)
    }
    fn phi_m(&self, s: f64, x: f64, m: f64) -> f64 {
        let h = self.fd_step() * m;
        (self.value(s, x, m + h) - self.value(s, x, m - h)) / (2.0 * h)
    }
    fn phi_xx(&self, s: f64, x: f64, m: f64) -> f64 {
        let h = self.fd_step() * x.abs().max(1.0);
        (self.value(s, x + h, m) - 2.0 * self.value(s, x, m) + self.value(s, x - h, m)) / (h * h)
    }
    fn phi_mm(&self, s: f64, x: f64, m: f64) -> f64 {
        let h = self.fd_step() * m;
        (self.value(s, x, m + h) - 2.0 * self.value(s, x, m) + self.value(s, x, m - h)) / (h * h)
    }
    fn phi_xm(&self, s: f64, x: f64, m: f64) -> f64 {
        let hx = self.fd_step() * x.abs().max(1.0);
        let hm = self.fd_step() * m;
        (self.value(s, x + hx, m + hm) - self.value(s, x + hx, m - hm) - self.value(s, x - hx, m + hm)
            + self.value(s, x - hx, m - hm))
            / (4.0 * hx * hm)
    }
}

type TimeFn = dyn Fn(f64) -> f64 + Send + Sync;

fn memoized<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Arc<TimeFn> {
    let last = std::sync::Mutex::new((f64::NAN, f64::NAN));
    Arc::new(move |s| {
        let mut g = last.lock().unwrap_or_else(|e| e.into_inner());
        if g.0.to_bits() != s.to_bits() {
            *g = (s, f(s));
        }
        g.1
    })
}

/// `phi(s, x, m) = -x m - m log m + kappa(s) m` with analytic partials.
#[derive(Clone)]
pub struct Ansatz {
    kappa: Arc<TimeFn>,
    kappa_prime: Arc<TimeFn>,
    pub label: String,
}

impl fmt::Debug for Ansatz {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ansatz").field("label", &self.label).finish_non_exhaustive()
    }
}

impl Ansatz {
    pub fn new<K, D>(label: impl Into<String>, kappa: K, kappa_prime: D) -> Self
    where
        K: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Ansatz { kappa: Arc::new(kappa), kappa_prime: Arc::new(kappa_prime), label: label.into() }
    }

    /// `kappa = 0`.
    pub fn zero() -> Self {
        Ansatz::new("kappa = 0", |_| 0.0, |_| 0.0)
    }

    /// `kappa(s) = -int_s^T (mu/sigma)^2 / 2 dt` for a market without jumps.
    pub fn closed_form(spec: &GameSpec) -> Result<Self> {
        require_no_jumps(spec)?;
        let (m1, m2) = (spec.market.clone(), spec.market.clone());
        Ok(Ansatz {
            kappa: memoized(move |s| -m1.half_sharpe_integral(s)),
            kappa_prime: Arc::new(move |s| {
                let th = m2.mu.at(s) / m2.sigma.at(s);
                0.5 * th * th
            }),
            label: "closed form".into(),
        })
    }

    /// `kappa' = -(saddle value of the reduced generator)` from the first-order
    /// solution at each time, integrated back from `kappa(T) = 0`.
    pub fn from_saddle(spec: &GameSpec, system: FirstOrderSystem) -> Result<Self> {
        let spec = spec.clone();
        // fail early if the system has no solution on the grid
        for &t in &spec.market.grid() {
            solve_first_order(&spec, t, system)?;
        }
        let kp = {
            let spec = spec.clone();
            memoized(move |s: f64| match solve_first_order(&spec, s, system) {
                Ok(sol) => -reduced_generator(&spec, s, &sol.controls, 0.0),
                Err(_) => f64::NAN,
            })
        };
        let grid = spec.market.grid();
        let n = grid.len() - 1;
        // tail[i] = int_{t_i}^T kappa'
        let mut tail = vec![0.0; n + 1];
        for i in (0..n).rev() {
            tail[i] = tail[i + 1] + integrate(|t| kp(t), grid[i], grid[i + 1], &[], 1);
        }
        let kp2 = kp.clone();
        let kappa = memoized(move |s: f64| {
            let i = grid.partition_point(|&t| t <= s).clamp(1, n);
            -(integrate(|t| kp2(t), s, grid[i], &[], 1) + tail[i])
        });
        Ok(Ansatz { kappa, kappa_prime: kp, label: format!("saddle ({system:?})") })
    }

    pub fn kappa(&self, s: f64) -> f64 {
        (self.kappa)(s)
    }

    pub fn kappa_prime(&self, s: f64) -> f64 {
        (self.kappa_prime)(s)
    }
}

impl CandidateValue for Ansatz {
    fn value(&self, s: f64, x: f64, m: f64) -> f64 {
        -x * m - m * m.ln() + self.kappa(s) * m
    }
    fn phi_s(&self, s: f64, _x: f64, m: f64) -> f64 {
        self.kappa_prime(s) * m
    }
    fn phi_x(&self, _s: f64, _x: f64, m: f64) -> f64 {
        -m
    }
    fn phi_m(&self, s: f64, x: f64, m: f64) -> f64 {
        -x - m.ln() - 1.0 + self.kappa(s)
    }
    fn phi_xx(&self, _s: f64, _x: f64, _m: f64) -> f64 {
        0.0
    }
    fn phi_mm(&self, _s: f64, _x: f64, m: f64) -> f64 {
        -1.0 / m
    }
    fn phi_xm(&self, _s: f64, _x: f64, _m: f64) -> f64 {
        -1.0
    }
}

/// Any function of `(s, x, m)`, differentiated numerically.
pub struct FnCandidate<F>(pub F);

impl<F: Fn(f64, f64, f64) -> f64> CandidateValue for FnCandidate<F> {
    fn value(&self, s: f64, x: f64, m: f64) -> f64 {
        (self.0)(s, x, m)
    }
}

/// Terminal reward `g(x, m) = -x m - m log m`.
pub fn terminal_reward(x: f64, m: f64) -> f64 {
    -x * m - m * m.ln()
}

/// The controlled generator applied to `phi` at `pt`, with the Levy integral
/// as a sum over the atoms.
pub fn generator_apply<C: CandidateValue + ?Sized>(spec: &GameSpec, phi: &C, pt: &GamePoint, c: &GameControls) -> Result<f64> {
    spec.check_point(pt)?;
    spec.check_controls(c)?;
    let GamePoint { s, x, m } = *pt;
    let mu = spec.market.mu.at(s);
    let sigma = spec.market.sigma.at(s);
    let (p, px, pm) = (phi.value(s, x, m), phi.phi_x(s, x, m), phi.phi_m(s, x, m));
    let mut a = phi.phi_s(s, x, m) + c.w * mu * px + 0.5 * c.w * c.w * sigma * sigma * phi.phi_xx(s, x, m)
        + 0.5 * m * m * c.theta0 * c.theta0 * phi.phi_mm(s, x, m)
        + c.w * c.theta0 * m * sigma * phi.phi_xm(s, x, m);
    for (atom, &t1) in spec.market.atoms.iter().zip(&c.theta1) {
        if atom.lambda == 0.0 {
            continue;
        }
        let g = atom.gamma.at(s);
        let jump = phi.value(s, x + c.w * g, m + m * t1) - p - px * c.w * g - pm * m * t1;
        a += atom.lambda * jump;
    }
    if !a.is_finite() {
        return Err(Error::NonFinite { what: format!("generator at ({s}, {x}, {m})"), step: 0 });
    }
    Ok(a)
}

/// The generator of the ansatz divided by `m`:
/// `kappa' - w mu - theta0^2/2 - w theta0 sigma
///  + sum_j nu_j [theta1_j - (1 + theta1_j) log(1 + theta1_j) - w gamma_j theta1_j]`.
pub fn reduced_generator(spec: &GameSpec, s: f64, c: &GameControls, kappa_prime: f64) -> f64 {
    let mu = spec.market.mu.at(s);
    let sigma = spec.market.sigma.at(s);
    let mut a = kappa_prime - c.w * mu - 0.5 * c.theta0 * c.theta0 - c.w * c.theta0 * sigma;
    for (atom, &t1) in spec.market.atoms.iter().zip(&c.theta1) {
        let g = atom.gamma.at(s);
        a += atom.lambda * (t1 - (1.0 + t1) * (1.0 + t1).ln() - c.w * g * t1);
    }
    a
}

/// The reduced generator in the printed form, with jump integrand
/// `theta1 (1 - log(1 + theta1) - w gamma)`.
pub fn reduced_generator_displayed(spec: &GameSpec, s: f64, c: &GameControls, kappa_prime: f64) -> f64 {
    let mu = spec.market.mu.at(s);
    let sigma = spec.market.sigma.at(s);
    let mut a = kappa_prime - c.w * mu - 0.5 * c.theta0 * c.theta0 - c.w * c.theta0 * sigma;
    for (atom, &t1) in spec.market.atoms.iter().zip(&c.theta1) {
        let g = atom.gamma.at(s);
        a += atom.lambda * t1 * (1.0 - (1.0 + t1).ln() - c.w * g);
    }
    a
}

/// Which first-order system to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOrderSystem {
    /// Stationarity of the generator itself:
    /// `theta0 + w sigma = 0`, `log(1 + theta1_j) + w gamma_j = 0`,
    /// `mu + theta0 sigma + sum_j nu_j theta1_j gamma_j = 0`.
    #[default]
    Stationarity,
    /// The printed equations:
    /// `theta0 + w sigma = 0`,
    /// `1 - log(1 + theta1_j) - w gamma_j - theta1_j / (1 + theta1_j) = 0`,
    /// `mu + theta0 sigma - sum_j nu_j theta1_j gamma_j = 0`.
    Displayed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstOrderSolution {
    pub s: f64,
    pub controls: GameControls,
    pub residual: f64,
    pub iterations: usize,
    pub system: FirstOrderSystem,
}

fn require_no_jumps(spec: &GameSpec) -> Result<()> {
    if spec.market.has_jumps() {
        return Err(Error::InvalidModel("the closed form needs a market without jumps".into()));
    }
    Ok(())
}

// unknowns are ordered (theta0, theta1_1..theta1_n, w)
fn first_order_residual(spec: &GameSpec, s: f64, v: &[f64], system: FirstOrderSystem) -> Vec<f64> {
    let n = spec.n_atoms();
    let mu = spec.market.mu.at(s);
    let sigma = spec.market.sigma.at(s);
    let (th0, w) = (v[0], v[n + 1]);
    let mut r = vec![0.0; n + 2];
    r[0] = th0 + w * sigma;
    let mut jump = 0.0;
    for (j, atom) in spec.market.atoms.iter().enumerate() {
        let (t1, g) = (v[1 + j], atom.gamma.at(s));
        r[1 + j] = match system {
            FirstOrderSystem::Stationarity => (1.0 + t1).ln() + w * g,
            FirstOrderSystem::Displayed => 1.0 - (1.0 + t1).ln() - w * g - t1 / (1.0 + t1),
        };
        jump += atom.lambda * t1 * g;
    }
    r[n + 1] = match system {
        FirstOrderSystem::Stationarity => mu + th0 * sigma + jump,
        FirstOrderSystem::Displayed => mu + th0 * sigma - jump,
    };
    r
}

fn first_order_jacobian(spec: &GameSpec, s: f64, v: &[f64], system: FirstOrderSystem) -> DMatrix<f64> {
    let n = spec.n_atoms();
    let sigma = spec.market.sigma.at(s);
    let mut jac = DMatrix::zeros(n + 2, n + 2);
    jac[(0, 0)] = 1.0;
    jac[(0, n + 1)] = sigma;
    jac[(n + 1, 0)] = sigma;
    for (j, atom) in spec.market.atoms.iter().enumerate() {
        let (t1, g) = (v[1 + j], atom.gamma.at(s));
        match system {
            FirstOrderSystem::Stationarity => {
                jac[(1 + j, 1 + j)] = 1.0 / (1.0 + t1);
                jac[(1 + j, n + 1)] = g;
                jac[(n + 1, 1 + j)] = atom.lambda * g;
            }
            FirstOrderSystem::Displayed => {
                jac[(1 + j, 1 + j)] = -1.0 / (1.0 + t1) - 1.0 / ((1.0 + t1) * (1.0 + t1));
                jac[(1 + j, n + 1)] = -g;
                jac[(n + 1, 1 + j)] = -atom.lambda * g;
            }
        }
    }
    jac
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_RESIDUAL: f64 = 1e-12;
const NEWTON_STEP: f64 = 1e-14;
const ACCEPT_RESIDUAL: f64 = 1e-10;

/// Optimal controls at time `s`. Without jumps this is the closed form
/// `theta0 = -mu/sigma`, `w = mu/sigma^2`; otherwise damped Newton from zero.
pub fn solve_first_order(spec: &GameSpec, s: f64, system: FirstOrderSystem) -> Result<FirstOrderSolution> {
    let n = spec.n_atoms();
    let mu = spec.market.mu.at(s);
    let sigma = spec.market.sigma.at(s);
    if !(sigma > 0.0) {
        return Err(Error::InvalidModel(format!("sigma({s}) = {sigma} must be positive")));
    }
    if !spec.market.has_jumps() && system == FirstOrderSystem::Stationarity {
        let controls = GameControls { theta0: -mu / sigma, theta1: vec![0.0; n], w: mu / (sigma * sigma) };
        let v: Vec<f64> = std::iter::once(controls.theta0).chain(controls.theta1.iter().copied()).chain([controls.w]).collect();
        let residual = sup_norm(&first_order_residual(spec, s, &v, system));
        return Ok(FirstOrderSolution { s, controls, residual, iterations: 0, system });
    }

    let mut v = vec![0.0; n + 2];
    let mut r = first_order_residual(spec, s, &v, system);
    let mut iterations = 0;
    while iterations < NEWTON_MAX_ITER && sup_norm(&r) > NEWTON_RESIDUAL {
        iterations += 1;
        let jac = first_order_jacobian(spec, s, &v, system);
        let rhs = DVector::from_iterator(n + 2, r.iter().map(|x| -x));
        let Some(step) = jac.lu().solve(&rhs) else {
            return Err(Error::NoConvergence { iterations, residual: sup_norm(&r) });
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, d)| a + scale * d).collect();
            if trial[1..=n].iter().all(|&t| t > -1.0) {
                let rt = first_order_residual(spec, s, &trial, system);
                if sup_norm(&rt) < sup_norm(&r) || scale < 1e-6 {
                    v = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted || sup_norm(step.as_slice()) * scale <= NEWTON_STEP {
            break;
        }
    }
    let residual = sup_norm(&r);
    if !(residual <= ACCEPT_RESIDUAL) {
        return Err(Error::NoConvergence { iterations, residual });
    }
    Ok(FirstOrderSolution {
        s,
        controls: GameControls { theta0: v[0], theta1: v[1..=n].to_vec(), w: v[n + 1] },
        residual,
        iterations,
        system,
    })
}

/// Central-difference gradient of the full generator applied to `phi` with
/// respect to `(theta0, theta1, w)`, in sup norm.
pub fn stationarity_gap<C: CandidateValue + ?Sized>(spec: &GameSpec, phi: &C, pt: &GamePoint, c: &GameControls, h: f64) -> Result<f64> {
    let n = spec.n_atoms();
    let mut worst: f64 = 0.0;
    for k in 0..n + 2 {
        let bump = |d: f64| {
            let mut cc = c.clone();
            match k {
                0 => cc.theta0 += d,
                k if k == n + 1 => cc.w += d,
                k => cc.theta1[k - 1] += d,
            }
            cc
        };
        let g = (generator_apply(spec, phi, pt, &bump(h))? - generator_apply(spec, phi, pt, &bump(-h))?) / (2.0 * h);
        worst = worst.max(g.abs());
    }
    Ok(worst)
}

/// `-x m - m log m + kappa(s) m` with `kappa(s) = -int_s^T (mu/sigma)^2 / 2 dt`.
pub fn value_closed(spec: &GameSpec, pt: &GamePoint) -> Result<f64> {
    require_no_jumps(spec)?;
    spec.check_point(pt)?;
    Ok(terminal_reward(pt.x, pt.m) - pt.m * spec.market.half_sharpe_integral(pt.s))
}

/// Points `(s, x, m)` on which the HJBI conditions are tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub s: Vec<f64>,
    pub x: Vec<f64>,
    pub m: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl Lattice {
    /// `n` times on `[0, T)` and `n` values each of `x` and `m` on `[0.25, 4]`.
    pub fn uniform(horizon: f64, n: usize) -> Self {
        Lattice {
            s: (0..n).map(|i| horizon * i as f64 / n as f64).collect(),
            x: linspace(0.25, 4.0, n),
            m: linspace(0.25, 4.0, n),
        }
    }

    pub fn len(&self) -> usize {
        self.s.len() * self.x.len() * self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self) -> impl Iterator<Item = GamePoint> + '_ {
        self.s.iter().flat_map(move |&s| self.x.iter().flat_map(move |&x| self.m.iter().map(move |&m| GamePoint { s, x, m })))
    }
}

/// Finite grids standing in for the control sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub theta0: Vec<f64>,
    pub theta1: Vec<f64>,
    pub w: Vec<f64>,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid { theta0: linspace(-2.0, 2.0, 41), theta1: linspace(-0.9, 3.0, 41), w: linspace(-2.0, 2.0, 41) }
    }
}

/// Worst violation of one HJBI condition over the lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub passed: bool,
    pub worst_violation: f64,
    pub location: Option<GamePoint>,
    pub probe: Option<GameControls>,
    pub checks: usize,
    /// Lattice points where the condition failed.
    pub failures: usize,
}

impl ConditionReport {
    fn new(condition: &str) -> Self {
        ConditionReport {
            condition: condition.into(),
            passed: true,
            worst_violation: 0.0,
            location: None,
            probe: None,
            checks: 0,
            failures: 0,
        }
    }

    fn record(&mut self, violation: f64, pt: GamePoint, probe: &GameControls) {
        self.checks += 1;
        if violation > self.worst_violation || violation.is_nan() {
            self.worst_violation = violation;
            self.location = Some(pt);
            self.probe = Some(probe.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HjbiReport {
    pub candidate: String,
    pub tolerance: f64,
    pub lattice_points: usize,
    pub theta_probes: usize,
    pub w_probes: usize,
    /// (i) the market's optimum against every probed `w`: `A >= 0`.
    pub investor_condition: ConditionReport,
    /// (ii) every probed `theta` against the investor's optimum: `A <= 0`.
    pub market_condition: ConditionReport,
    /// (iii) `|A| <= tol` at the candidate controls.
    pub equality_condition: ConditionReport,
    /// `max |phi(T, x, m) - g(x, m)|` over the lattice.
    pub terminal_gap: f64,
    pub passed: bool,
}

fn theta_probes(probes: &ProbeGrid, n_atoms: usize) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = probes.theta0.iter().map(|&t| (t, Vec::new())).collect();
    for _ in 0..n_atoms {
        out = out.into_iter().flat_map(|(t0, t1)| probes.theta1.iter().map(move |&a| {
            let mut v = t1.clone();
            v.push(a);
            (t0, v)
        })).collect();
    }
    out
}

/// Checks the three HJBI conditions for `phi` and the feedback `controls`
/// at every lattice point against the probe grids (`f = 0` in this game).
pub fn verify_hjbi<C, F>(spec: &GameSpec, phi: &C, controls: F, lattice: &Lattice, probes: &ProbeGrid, tolerance: f64) -> Result<HjbiReport>
where
    C: CandidateValue + ?Sized,
    F: Fn(&GamePoint) -> Result<GameControls>,
{
    let thetas = theta_probes(probes, spec.n_atoms());
    let mut inv = ConditionReport::new("investor");
    let mut mkt = ConditionReport::new("market");
    let mut eq = ConditionReport::new("equality");
    let mut terminal_gap: f64 = 0.0;
    for pt in lattice.points() {
        spec.check_point(&pt)?;
        let hat = controls(&pt)?;
        let a_hat = generator_apply(spec, phi, &pt, &hat)?;
        eq.record(a_hat.abs(), pt, &hat);
        if a_hat.abs() > tolerance || a_hat.is_nan() {
            eq.failures += 1;
        }
        let mut fail_i = false;
        for &w in &probes.w {
            let c = GameControls { w, ..hat.clone() };
            let a = generator_apply(spec, phi, &pt, &c)?;
            let v = -a;
            inv.record(v, pt, &c);
            fail_i |= v > tolerance || v.is_nan();
        }
        inv.failures += fail_i as usize;
        let mut fail_ii = false;
        for (t0, t1) in &thetas {
            let c = GameControls { theta0: *t0, theta1: t1.clone(), w: hat.w };
            let a = generator_apply(spec, phi, &pt, &c)?;
            let v = a;
            mkt.record(v, pt, &c);
            fail_ii |= v > tolerance || v.is_nan();
        }
        mkt.failures += fail_ii as usize;
        let t = spec.market.horizon;
        terminal_gap = terminal_gap.max((phi.value(t, pt.x, pt.m) - terminal_reward(pt.x, pt.m)).abs());
    }
    for c in [&mut inv, &mut mkt, &mut eq] {
        c.passed = c.failures == 0;
    }
    let passed = inv.passed && mkt.passed && eq.passed && terminal_gap <= tolerance;
    Ok(HjbiReport {
        candidate: String::new(),
        tolerance,
        lattice_points: lattice.len(),
        theta_probes: thetas.len(),
        w_probes: probes.w.len(),
        investor_condition: inv,
        market_condition: mkt,
        equality_condition: eq,
        terminal_gap,
        passed,
    })
}

/// The first-order controls as a feedback rule (they depend on time only).
pub fn optimal_feedback(spec: &GameSpec, system: FirstOrderSystem) -> impl Fn(&GamePoint) -> Result<GameControls> + '_ {
    move |pt| solve_first_order(spec, pt.s, system).map(|sol| sol.controls)
}

/// The investor shifts `w` by `dw` and the market answers optimally:
/// `theta0 = -w sigma`, `theta1_j = exp(-w gamma_j) - 1`.
pub fn perturbed_feedback(spec: &GameSpec, dw: f64) -> impl Fn(&GamePoint) -> Result<GameControls> + '_ {
    move |pt| {
        let hat = solve_first_order(spec, pt.s, FirstOrderSystem::Stationarity)?;
        let w = hat.controls.w + dw;
        let sigma = spec.market.sigma.at(pt.s);
        Ok(GameControls {
            theta0: -w * sigma,
            theta1: spec.market.atoms.iter().map(|a| (-w * a.gamma.at(pt.s)).exp() - 1.0).collect(),
            w,
        })
    }
}

/// The default check: closed-form candidate (or the saddle candidate when
/// the market jumps) with its optimal controls on a `20^3` lattice.
pub fn verify_default(spec: &GameSpec, tolerance: f64) -> Result<HjbiReport> {
    let phi = if spec.market.has_jumps() {
        Ansatz::from_saddle(spec, FirstOrderSystem::Stationarity)?
    } else {
        Ansatz::closed_form(spec)?
    };
    let lattice = Lattice::uniform(spec.market.horizon, 20);
    let mut r = verify_hjbi(spec, &phi, optimal_feedback(spec, FirstOrderSystem::Stationarity), &lattice, &ProbeGrid::default(), tolerance)?;
    r.candidate = phi.label.clone();
    Ok(r)
}
