//! Stochastic maximum principle for forward-backward control problems:
//! Hamiltonian, adjoint processes, a necessary-condition checker and the
//! closed-form utility maximization and quadratic risk minimization examples.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{solve_linear, solve_regression, BsdeSolution, Claim, Driver, LinearDriverParams, SolveOptions};
use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::market::{relative_entropy, stochastic_exponential, MarketModel, PathEnsemble};
use crate::numerics::{bisect, Estimate};
use crate::regression::{Projector, StateVar};

/// What the controller sees at a grid time: the state observed with the
/// information lag applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub t: f64,
    pub step: usize,
    /// `X` at the observation step `max(step - lag, 0)`.
    pub x_obs: f64,
    /// `W` at the observation step.
    pub w_obs: f64,
}

type ControlFn = dyn Fn(&ControlInput) -> f64 + Send + Sync;

/// A feedback control on the delayed information.
#[derive(Clone)]
pub struct Control {
    f: Arc<ControlFn>,
    pub label: String,
}

impl fmt::Debug for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Control").field("label", &self.label).finish_non_exhaustive()
    }
}

impl Control {
    pub fn new<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ControlInput) -> f64 + Send + Sync + 'static,
    {
        Control { f: Arc::new(f), label: label.into() }
    }

    pub fn constant(v: f64) -> Self {
        Control::new(format!("constant {v}"), move |_| v)
    }

    pub fn curve(c: Curve) -> Self {
        Control::new("curve", move |i| c.at(i.t))
    }

    #[inline]
    pub fn eval(&self, input: &ControlInput) -> f64 {
        (self.f)(input)
    }

    /// `self + a * other`.
    pub fn perturbed(&self, other: &Control, a: f64) -> Control {
        let (u, b) = (self.clone(), other.clone());
        Control::new(format!("{} + {a} * ({})", self.label, other.label), move |i| u.eval(i) + a * b.eval(i))
    }
}

/// Arguments of the running coefficients `f` and `g`.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
    pub u: f64,
}

/// Adjoint variables `(lambda, p, q, r)`.
#[derive(Debug, Clone, Copy)]
pub struct Adjoint<'a> {
    pub lambda: f64,
    pub p: f64,
    pub q: f64,
    pub r: &'a [f64],
}

type ForwardFn = dyn Fn(f64, f64, f64) -> f64 + Send + Sync;
type JumpFn = dyn Fn(f64, f64, f64, usize) -> f64 + Send + Sync;
type RunningFn = dyn Fn(&Point<'_>) -> f64 + Send + Sync;
type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Controlled forward SDE
/// `dX = b(t,X,u) dt + sigma(t,X,u) dB + sum_j gamma_j(t,X,u) dN~_j`
/// with an optional backward equation `dY = -g(t,X,Y,Z,K,u) dt + Z dB + K dN~`,
/// `Y(T) = h(X(T))`, and performance
/// `J(u) = E[int f dt + phi(X(T))] + psi(Y(0))`.
///
/// The forward coefficients do not read `(Y, Z, K)`.
#[derive(Clone)]
pub struct ControlProblem {
    pub label: String,
    pub x0: f64,
    pub b: Arc<ForwardFn>,
    pub sigma: Arc<ForwardFn>,
    pub gamma: Option<Arc<JumpFn>>,
    pub f: Option<Arc<RunningFn>>,
    pub phi: Arc<ScalarFn>,
    pub g: Option<Arc<RunningFn>>,
    pub h: Option<Arc<ScalarFn>>,
    pub psi: Option<Arc<ScalarFn>>,
    /// Open interval of admissible control values.
    pub control_set: (f64, f64),
    /// Information lag in grid steps.
    pub lag_steps: usize,
    /// Jump intensities `nu({zeta_j})`.
    pub lambdas: Vec<f64>,
    /// Relative step of the central differences used for partial derivatives.
    pub derivative_step: f64,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("label", &self.label)
            .field("x0", &self.x0)
            .field("control_set", &self.control_set)
            .field("lag_steps", &self.lag_steps)
            .field("lambdas", &self.lambdas)
            .finish_non_exhaustive()
    }
}

fn diff<F: FnMut(f64) -> f64>(mut f: F, v: f64, rel: f64) -> f64 {
    let h = rel * v.abs().max(1.0);
    (f(v + h) - f(v - h)) / (2.0 * h)
}

impl ControlProblem {
    pub fn new<B, S, P>(label: impl Into<String>, x0: f64, b: B, sigma: S, phi: P) -> Self
    where
        B: Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        P: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        ControlProblem {
            label: label.into(),
            x0,
            b: Arc::new(b),
            sigma: Arc::new(sigma),
            gamma: None,
            f: None,
            phi: Arc::new(phi),
            g: None,
            h: None,
            psi: None,
            control_set: (f64::NEG_INFINITY, f64::INFINITY),
            lag_steps: 0,
            lambdas: Vec::new(),
            derivative_step: 1e-5,
        }
    }

    pub fn with_jumps<G>(mut self, lambdas: Vec<f64>, gamma: G) -> Self
    where
        G: Fn(f64, f64, f64, usize) -> f64 + Send + Sync + 'static,
    {
        self.lambdas = lambdas;
        self.gamma = Some(Arc::new(gamma));
        self
    }

    pub fn with_running<F>(mut self, f: F) -> Self
    where
        F: Fn(&Point<'_>) -> f64 + Send + Sync + 'static,
    {
        self.f = Some(Arc::new(f));
        self
    }

    pub fn with_backward<G, H, P>(mut self, g: G, h: H, psi: P) -> Self
    where
        G: Fn(&Point<'_>) -> f64 + Send + Sync + 'static,
        H: Fn(f64) -> f64 + Send + Sync + 'static,
        P: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.g = Some(Arc::new(g));
        self.h = Some(Arc::new(h));
        self.psi = Some(Arc::new(psi));
        self
    }

    pub fn with_control_set(mut self, lo: f64, hi: f64) -> Self {
        self.control_set = (lo, hi);
        self
    }

    pub fn with_lag(mut self, steps: usize) -> Self {
        self.lag_steps = steps;
        self
    }

    /// Portfolio fraction `pi` in `dX = pi X (b0 dt + sigma0 dB)` with `U = log`.
    pub fn log_utility(market: &MarketModel, x0: f64) -> Self {
        let (m1, s1) = (market.mu.clone(), market.sigma.clone());
        ControlProblem::new("log utility", x0, move |t, x, u| u * x * m1.at(t), move |t, x, u| u * x * s1.at(t), |x| {
            if x > 0.0 {
                x.ln()
            } else {
                f64::NAN
            }
        })
    }

    /// Same wealth equation, maximizing `Y(0)` for `dY = z^2/2 dt + Z dB`, `Y(T) = X(T)`.
    pub fn quadratic_risk(market: &MarketModel, x0: f64) -> Self {
        let (m1, s1) = (market.mu.clone(), market.sigma.clone());
        ControlProblem::new("quadratic risk", x0, move |t, x, u| u * x * m1.at(t), move |t, x, u| u * x * s1.at(t), |_| 0.0)
            .with_backward(|p| -0.5 * p.z * p.z, |x| x, |y| y)
    }

    fn n_atoms(&self) -> usize {
        self.lambdas.len()
    }

    fn jump_coef(&self, t: f64, x: f64, u: f64, j: usize) -> f64 {
        self.gamma.as_ref().map_or(0.0, |g| g(t, x, u, j))
    }

    /// Checks that all coefficients and their central-difference partials are
    /// finite at randomized points.
    pub fn check_differentiability(&self, horizon: f64, probes: usize, seed: u64) -> Result<()> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let na = self.n_atoms();
        for _ in 0..probes {
            let t = rng.random_range(0.0..horizon);
            let x = self.x0 * rng.random_range(0.5..1.5);
            let y = rng.random_range(-1.0..1.0);
            let z = rng.random_range(-1.0..1.0);
            let k: Vec<f64> = (0..na).map(|_| rng.random_range(-0.5..0.5)).collect();
            let (lo, hi) = self.control_set;
            let u = if lo.is_finite() && hi.is_finite() { rng.random_range(lo..hi) } else { rng.random_range(-1.0..1.0) };
            let pt = Point { t, x, y, z, k: &k, u };
            let adj = Adjoint { lambda: 1.0, p: 1.0, q: 1.0, r: &k };
            let d = self.partials(&pt, &adj);
            let vals = [self.hamiltonian(&pt, &adj), d.x, d.y, d.z, d.u, (self.phi)(x)];
            if vals.iter().chain(&d.k).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("coefficients of {} at t={t}, x={x}, u={u}", self.label), step: 0 });
            }
        }
        Ok(())
    }

    /// `H = f + g lambda + b p + sigma q + sum_j gamma_j r_j nu_j`.
    pub fn hamiltonian(&self, pt: &Point<'_>, adj: &Adjoint<'_>) -> f64 {
        let mut h = self.f.as_ref().map_or(0.0, |f| f(pt));
        if let Some(g) = &self.g {
            h += g(pt) * adj.lambda;
        }
        h += (self.b)(pt.t, pt.x, pt.u) * adj.p + (self.sigma)(pt.t, pt.x, pt.u) * adj.q;
        for (j, (&l, &r)) in self.lambdas.iter().zip(adj.r).enumerate() {
            h += self.jump_coef(pt.t, pt.x, pt.u, j) * r * l;
        }
        h
    }

    /// Partial derivatives of `H` by central differences. `k` holds the
    /// densities `dH/dk_j / nu_j` (zero for atoms without mass).
    pub fn partials(&self, pt: &Point<'_>, adj: &Adjoint<'_>) -> Partials {
        let e = self.derivative_step;
        let h = |p: Point<'_>| self.hamiltonian(&p, adj);
        let x = diff(|v| h(Point { x: v, ..*pt }), pt.x, e);
        let y = diff(|v| h(Point { y: v, ..*pt }), pt.y, e);
        let z = diff(|v| h(Point { z: v, ..*pt }), pt.z, e);
        let u = diff(|v| h(Point { u: v, ..*pt }), pt.u, e);
        let mut kk = pt.k.to_vec();
        let k = (0..pt.k.len())
            .map(|j| {
                if self.lambdas[j] == 0.0 {
                    return 0.0;
                }
                let base = kk[j];
                let d = diff(
                    |v| {
                        kk[j] = v;
                        let r = h(Point { k: &kk, ..*pt });
                        kk[j] = base;
                        r
                    },
                    base,
                    e,
                );
                d / self.lambdas[j]
            })
            .collect();
        Partials { x, y, z, u, k }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partials {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
    pub k: Vec<f64>,
}

fn check_grid(paths: &PathEnsemble, problem: &ControlProblem) -> Result<()> {
    if paths.n_atoms() != problem.n_atoms() {
        return Err(Error::GridMismatch(format!(
            "problem has {} jump atoms, ensemble has {}",
            problem.n_atoms(),
            paths.n_atoms()
        )));
    }
    Ok(())
}

/// Forward state and controls under one control, `[step][path]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    n_paths: usize,
}

impl Trajectory {
    pub fn x_at(&self, path: usize, step: usize) -> f64 {
        self.x[step * self.n_paths + path]
    }

    pub fn u_at(&self, path: usize, step: usize) -> f64 {
        self.u[step * self.n_paths + path]
    }

    pub fn terminal(&self) -> &[f64] {
        let n = self.x.len() / self.n_paths - 1;
        &self.x[n * self.n_paths..]
    }
}

/// Euler scheme for the controlled forward equation.
pub fn simulate_state(problem: &ControlProblem, control: &Control, paths: &PathEnsemble) -> Result<Trajectory> {
    check_grid(paths, problem)?;
    let n = paths.n_steps();
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();
    let (lo, hi) = problem.control_set;
    let mut x = vec![problem.x0; (n + 1) * np];
    let mut u = vec![0.0; n * np];
    let mut w = vec![0.0; (n + 1) * np];
    for step in 0..n {
        let t = paths.grid()[step];
        let obs = step.saturating_sub(problem.lag_steps);
        let dbs = paths.db_step(step);
        for p in 0..np {
            let xi = x[step * np + p];
            let input = ControlInput { t, step, x_obs: x[obs * np + p], w_obs: w[obs * np + p] };
            let ui = control.eval(&input);
            if !(ui > lo && ui < hi) {
                return Err(Error::Inadmissible(format!(
                    "control {} = {ui} outside ({lo}, {hi}) at step {step}, path {p}",
                    control.label
                )));
            }
            u[step * np + p] = ui;
            let mut next = xi + (problem.b)(t, xi, ui) * dt + (problem.sigma)(t, xi, ui) * dbs[p];
            for j in 0..na {
                next += problem.jump_coef(t, xi, ui, j) * paths.dn_tilde(p, step, j);
            }
            if !next.is_finite() {
                return Err(Error::NonFinite { what: format!("state of {} on path {p}", problem.label), step: step + 1 });
            }
            x[(step + 1) * np + p] = next;
            w[(step + 1) * np + p] = w[step * np + p] + dbs[p];
        }
    }
    Ok(Trajectory { x, u, n_paths: np })
}

fn solve_backward(problem: &ControlProblem, traj: &Trajectory, paths: &PathEnsemble, opts: &SolveOptions) -> Result<Option<BsdeSolution>> {
    let (Some(g), Some(h)) = (&problem.g, &problem.h) else {
        return Ok(None);
    };
    let np = paths.n_paths();
    let xs = Arc::new(traj.x.clone());
    let us = Arc::new(traj.u.clone());
    let g = g.clone();
    let driver = Driver::new(format!("{} backward", problem.label), move |i| {
        let idx = i.step * np + i.path;
        g(&Point { t: i.t, x: xs[idx], y: i.y, z: i.z, k: i.k, u: us[idx] })
    });
    let terminal: Vec<f64> = traj.terminal().iter().map(|&x| h(x)).collect();
    let opts = SolveOptions { store_paths: true, stop_step: None, ..opts.clone() };
    solve_regression(&driver, &Claim::from_values("h(X(T))", terminal), paths, &opts).map(Some)
}

/// `J(u)` with per-path samples of the expectation part and the `psi(Y(0))` term.
struct Performance {
    samples: Vec<f64>,
    psi_term: f64,
    y0_samples: Vec<f64>,
}

fn performance(problem: &ControlProblem, control: &Control, paths: &PathEnsemble, opts: &SolveOptions) -> Result<(Performance, Trajectory, Option<BsdeSolution>)> {
    let traj = simulate_state(problem, control, paths)?;
    let back = solve_backward(problem, &traj, paths, opts)?;
    let n = paths.n_steps();
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();
    let zeros = vec![0.0; na];
    let mut samples: Vec<f64> = traj.terminal().iter().map(|&x| (problem.phi)(x)).collect();
    if let Some(f) = &problem.f {
        for step in 0..n {
            let t = paths.grid()[step];
            for (p, s) in samples.iter_mut().enumerate() {
                let (y, z, k) = match &back {
                    Some(b) => (b.y(p, step), b.z(p, step), (0..na).map(|j| b.k(p, step, j)).collect()),
                    None => (0.0, 0.0, zeros.clone()),
                };
                *s += f(&Point { t, x: traj.x_at(p, step), y, z, k: &k, u: traj.u_at(p, step) }) * dt;
            }
        }
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Inadmissible(format!("performance of {} is not finite on path {i}", control.label)));
    }
    let (psi_term, y0_samples) = match (&back, &problem.psi) {
        (Some(b), Some(psi)) => (psi(b.y0), b.y0_samples().to_vec()),
        _ => (0.0, vec![0.0; np]),
    };
    Ok((Performance { samples, psi_term, y0_samples }, traj, back))
}

/// Monte Carlo estimate of `J(u)`.
pub fn performance_value(problem: &ControlProblem, control: &Control, paths: &PathEnsemble, opts: &SolveOptions) -> Result<Estimate> {
    let (perf, _, _) = performance(problem, control, paths, opts)?;
    let e = Estimate::from_samples(&perf.samples);
    let se_y = if problem.psi.is_some() { Estimate::from_samples(&perf.y0_samples).std_error } else { 0.0 };
    Ok(Estimate { mean: e.mean + perf.psi_term, std_error: (e.std_error.powi(2) + se_y.powi(2)).sqrt() })
}

/// Adjoint processes along a control, all `[step][path]` (`r` is `[step][path][atom]`).
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub lambda: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub trajectory: Trajectory,
    pub backward: Option<BsdeSolution>,
    n_paths: usize,
}

impl AdjointState {
    pub fn lambda_at(&self, path: usize, step: usize) -> f64 {
        self.lambda[step * self.n_paths + path]
    }

    pub fn p_at(&self, path: usize, step: usize) -> f64 {
        self.p[step * self.n_paths + path]
    }

    pub fn q_at(&self, path: usize, step: usize) -> f64 {
        self.q[step * self.n_paths + path]
    }
}

fn point_at<'a>(back: &Option<BsdeSolution>, traj: &Trajectory, p: usize, step: usize, t: f64, k: &'a mut Vec<f64>) -> Point<'a> {
    let (y, z) = match back {
        Some(b) => {
            for (j, kj) in k.iter_mut().enumerate() {
                *kj = b.k(p, step, j);
            }
            (b.y(p, step), b.z(p, step))
        }
        None => (0.0, 0.0),
    };
    Point { t, x: traj.x_at(p, step), y, z, k: &k[..], u: traj.u_at(p, step) }
}

/// Forward `lambda` by Euler from `psi'(Y(0))`, then `(p, q, r)` by regression
/// on the linear BSDE `dp = -dH/dx dt + q dB + r dN~`,
/// `p(T) = phi'(X(T)) + lambda(T) h'(X(T))`.
pub fn adjoint(problem: &ControlProblem, control: &Control, paths: &PathEnsemble, opts: &SolveOptions) -> Result<AdjointState> {
    let traj = simulate_state(problem, control, paths)?;
    let back = solve_backward(problem, &traj, paths, opts)?;
    let n = paths.n_steps();
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();
    let e = problem.derivative_step;

    let lambda0 = match (&back, &problem.psi) {
        (Some(b), Some(psi)) => diff(|v| psi(v), b.y0, e),
        _ => 0.0,
    };
    let mut lambda = vec![lambda0; (n + 1) * np];
    // dH/dx = a + bx p + sx q + sum_j gx_j nu_j r_j, linear in (p, q, r)
    let mut a = vec![0.0; n * np];
    let mut bx = vec![0.0; n * np];
    let mut sx = vec![0.0; n * np];
    let mut gx = vec![0.0; n * np * na];
    let mut kbuf = vec![0.0; na];
    let zeros = vec![0.0; na];
    for step in 0..n {
        let t = paths.grid()[step];
        for p in 0..np {
            let lam = lambda[step * np + p];
            let pt = point_at(&back, &traj, p, step, t, &mut kbuf);
            let unit = Adjoint { lambda: lam, p: 0.0, q: 0.0, r: &zeros };
            let d = problem.partials(&pt, &unit);
            let idx = step * np + p;
            a[idx] = d.x;
            let (x, u) = (pt.x, pt.u);
            bx[idx] = diff(|v| (problem.b)(t, v, u), x, e);
            sx[idx] = diff(|v| (problem.sigma)(t, v, u), x, e);
            for j in 0..na {
                gx[idx * na + j] = diff(|v| problem.jump_coef(t, v, u, j), x, e) * problem.lambdas[j];
            }
            let mut next = lam + d.y * dt + d.z * paths.db(p, step);
            for j in 0..na {
                next += d.k[j] * paths.dn_tilde(p, step, j);
            }
            lambda[(step + 1) * np + p] = next;
        }
    }

    let terminal: Vec<f64> = (0..np)
        .map(|p| {
            let x = traj.x_at(p, n);
            let lam = lambda[n * np + p];
            let hx = problem.h.as_ref().map_or(0.0, |h| diff(|v| h(v), x, e));
            diff(|v| (problem.phi)(v), x, e) + lam * hx
        })
        .collect();
    let (a, bx, sx, gx) = (Arc::new(a), Arc::new(bx), Arc::new(sx), Arc::new(gx));
    let depends_on_y = bx.iter().any(|&v| v != 0.0);
    let mut driver = Driver::new("adjoint", move |i| {
        let idx = i.step * np + i.path;
        let mut v = a[idx] + bx[idx] * i.y + sx[idx] * i.z;
        for (j, kj) in i.k.iter().enumerate() {
            v += gx[idx * na + j] * kj;
        }
        v
    });
    driver.depends_on_y = depends_on_y;
    let opts = SolveOptions { store_paths: true, stop_step: None, ..opts.clone() };
    let sol = solve_regression(&driver, &Claim::from_values("p(T)", terminal), paths, &opts)?;
    let q: Vec<f64> = (0..n).flat_map(|s| sol.z_step(s).to_vec()).collect();
    let r: Vec<f64> = (0..n)
        .flat_map(|s| (0..np).flat_map(move |p| (0..na).map(move |j| (s, p, j))))
        .map(|(s, p, j)| sol.k(p, s, j))
        .collect();
    let p: Vec<f64> = (0..=n).flat_map(|s| sol.y_step(s).to_vec()).collect();
    Ok(AdjointState { lambda, p, q, r, trajectory: traj, backward: back, n_paths: np })
}

/// Outcome of [`check_necessary`].
#[derive(Debug, Clone, Serialize)]
pub struct NecessaryCheck {
    pub control: String,
    pub perturbation: String,
    pub h_fd: f64,
    /// Central difference of `a -> J(u + a beta)` at `a = 0` on common random numbers.
    pub fd_derivative: Estimate,
    /// `E[int dH/du beta dt]` from the adjoint processes.
    pub adjoint_derivative: Estimate,
    /// Cross-path mean of `dH/du` at each step.
    pub dh_du: Vec<Estimate>,
    /// RMS over paths of the regression of `dH/du` on the observed state, per step.
    pub conditional_rms: Vec<f64>,
    pub performance: Estimate,
}

/// Gateaux derivative of `J` along `perturbation` by finite differences and
/// by the adjoint route, plus the per-step estimates of `E[dH/du | G_t]`.
pub fn check_necessary(
    problem: &ControlProblem,
    control: &Control,
    perturbation: &Control,
    paths: &PathEnsemble,
    h_fd: f64,
    opts: &SolveOptions,
) -> Result<NecessaryCheck> {
    if !(h_fd > 0.0 && h_fd.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h_fd}")));
    }
    let up = control.perturbed(perturbation, h_fd);
    let down = control.perturbed(perturbation, -h_fd);
    let (pu, _, _) = performance(problem, &up, paths, opts)?;
    let (pd, _, _) = performance(problem, &down, paths, opts)?;
    let (p0, _, _) = performance(problem, control, paths, opts)?;

    let y_mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (mu, md) = (y_mean(&pu.y0_samples), y_mean(&pd.y0_samples));
    let slope = if (mu - md).abs() > 0.0 { (pu.psi_term - pd.psi_term) / (mu - md) } else { 1.0 };
    let fd_samples: Vec<f64> = (0..paths.n_paths())
        .map(|p| {
            let psi_fluct = slope * ((pu.y0_samples[p] - mu) - (pd.y0_samples[p] - md));
            (pu.samples[p] - pd.samples[p] + psi_fluct) / (2.0 * h_fd)
        })
        .collect();
    let fd = Estimate::from_samples(&fd_samples);
    let fd_derivative = Estimate { mean: fd.mean + (pu.psi_term - pd.psi_term) / (2.0 * h_fd), std_error: fd.std_error };

    let adj = adjoint(problem, control, paths, opts)?;
    let n = paths.n_steps();
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();
    let mut gateaux = vec![0.0; np];
    let mut dh_du = Vec::with_capacity(n);
    let mut conditional_rms = Vec::with_capacity(n);
    let mut kbuf = vec![0.0; na];
    let mut w = vec![0.0; (n + 1) * np];
    for s in 0..n {
        for p in 0..np {
            w[(s + 1) * np + p] = w[s * np + p] + paths.db(p, s);
        }
    }
    for step in 0..n {
        let t = paths.grid()[step];
        let mut col = vec![0.0; np];
        for (p, c) in col.iter_mut().enumerate() {
            let pt = point_at(&adj.backward, &adj.trajectory, p, step, t, &mut kbuf);
            let r = &adj.r[(step * np + p) * na..(step * np + p + 1) * na];
            let a = Adjoint { lambda: adj.lambda_at(p, step), p: adj.p_at(p, step), q: adj.q_at(p, step), r };
            *c = problem.partials(&pt, &a).u;
            let obs = step.saturating_sub(problem.lag_steps);
            let input = ControlInput { t, step, x_obs: adj.trajectory.x_at(p, obs), w_obs: w[obs * np + p] };
            gateaux[p] += *c * perturbation.eval(&input) * dt;
        }
        dh_du.push(Estimate::from_samples(&col));
        let obs = step.saturating_sub(problem.lag_steps);
        let wo = &w[obs * np..(obs + 1) * np];
        let rms = match Projector::fit(&[StateVar { values: wo, discrete: false }], opts.basis_degree, step) {
            Ok(pr) if np >= 10 * pr.n_basis() => {
                let fitted = pr.project(&col);
                (fitted.iter().map(|v| v * v).sum::<f64>() / np as f64).sqrt()
            }
            _ => dh_du.last().map_or(0.0, |e| e.mean.abs()),
        };
        conditional_rms.push(rms);
    }
    let p0e = Estimate::from_samples(&p0.samples);
    Ok(NecessaryCheck {
        control: control.label.clone(),
        perturbation: perturbation.label.clone(),
        h_fd,
        fd_derivative,
        adjoint_derivative: Estimate::from_samples(&gateaux),
        dh_du,
        conditional_rms,
        performance: Estimate { mean: p0e.mean + p0.psi_term, std_error: p0e.std_error },
    })
}

fn require_no_jumps(market: &MarketModel, paths: &PathEnsemble) -> Result<()> {
    if market.has_jumps() {
        return Err(Error::InvalidModel("this example is set in a market without jumps".into()));
    }
    if paths.n_steps() != market.n_steps || (paths.horizon() - market.horizon).abs() > 1e-12 {
        return Err(Error::GridMismatch("ensemble was not simulated on the market grid".into()));
    }
    Ok(())
}

/// Utility functions with explicit marginal inverse `I = (U')^{-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Utility {
    Log,
    /// `U(x) = x^delta / delta` with `delta < 1`, `delta != 0`.
    Power { delta: f64 },
}

impl Utility {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Utility::Log => x.ln(),
            Utility::Power { delta } => x.powf(delta) / delta,
        }
    }

    pub fn marginal_inverse(&self, y: f64) -> f64 {
        match *self {
            Utility::Log => 1.0 / y,
            Utility::Power { delta } => y.powf(1.0 / (delta - 1.0)),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Utility::Power { delta } = *self {
            if !(delta < 1.0 && delta != 0.0 && delta.is_finite()) {
                return Err(Error::InvalidArgument(format!("power utility needs delta < 1, delta != 0; got {delta}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UtilityResult {
    /// Multiplier from the closed-form budget equation.
    pub c: f64,
    /// Root of the sample budget equation found by bisection.
    pub c_sample: f64,
    /// Root of the closed-form budget equation found by bisection.
    pub c_bisection: f64,
    /// `E[Gamma(T) X(T)]`, which should equal the initial wealth.
    pub budget: Estimate,
    pub expected_utility: Estimate,
    /// `X(0)` recovered by solving the wealth BSDE for the optimal claim.
    pub y0_check: Estimate,
    #[serde(skip)]
    pub gamma_t: Vec<f64>,
    #[serde(skip)]
    pub terminal_wealth: Vec<f64>,
}

/// Optimal terminal wealth `X(T) = I(c Gamma(T))` for a jump-free market
/// with state-price density `Gamma` of `theta0 = -mu/sigma`.
pub fn utility_optimize(utility: Utility, market: &MarketModel, x0: f64, paths: &PathEnsemble) -> Result<UtilityResult> {
    utility.validate()?;
    require_no_jumps(market, paths)?;
    if !(x0 > 0.0 && x0.is_finite()) {
        return Err(Error::InvalidArgument(format!("initial wealth must be positive, got {x0}")));
    }
    let grid = paths.grid().to_vec();
    let theta = Curve::sample(&grid, |t| -market.mu.at(t) / market.sigma.at(t))?;
    let gamma = stochastic_exponential(paths, &Curve::Constant(0.0), &theta, &[])?;
    let gt = gamma.terminal().to_vec();
    let dt = paths.dt();
    // discrete log Gamma(T) is Gaussian with variance sum theta^2 dt
    let var: f64 = grid[..grid.len() - 1].iter().map(|&t| theta.at(t).powi(2) * dt).sum();

    let (c, moment) = match utility {
        Utility::Log => (1.0 / x0, 1.0),
        Utility::Power { delta } => {
            let a = delta / (delta - 1.0);
            let m = (0.5 * a * (a - 1.0) * var).exp();
            ((x0 / m).powf(delta - 1.0), m)
        }
    };
    let budget_closed = |c: f64| match utility {
        Utility::Log => 1.0 / c - x0,
        Utility::Power { delta } => c.powf(1.0 / (delta - 1.0)) * moment - x0,
    };
    let budget_sample = |c: f64| gt.iter().map(|&g| utility.marginal_inverse(c * g) * g).sum::<f64>() / gt.len() as f64 - x0;
    let bracket = |f: &dyn Fn(f64) -> f64| -> Result<f64> {
        let (mut lo, mut hi) = (c * 0.5, c * 2.0);
        for _ in 0..200 {
            if f(lo) > 0.0 && f(hi) < 0.0 {
                break;
            }
            lo *= 0.5;
            hi *= 2.0;
        }
        bisect(f, lo, hi, 1e-14 * c, 400)
    };
    let c_bisection = bracket(&budget_closed)?;
    if (c_bisection - c).abs() > 1e-10 * c.max(1.0) {
        return Err(Error::NoConvergence { iterations: 400, residual: (c_bisection - c).abs() });
    }
    let c_sample = bracket(&budget_sample)?;

    let terminal: Vec<f64> = gt.iter().map(|&g| utility.marginal_inverse(c * g)).collect();
    let budget = Estimate::from_iter(terminal.iter().zip(&gt).map(|(x, g)| x * g));
    let expected_utility = Estimate::from_iter(terminal.iter().map(|&x| utility.value(x)));
    // wealth BSDE dX = Z b0/sigma0 dt + Z dB, i.e. linear driver with beta = -b0/sigma0
    let params = LinearDriverParams { beta: theta.clone(), ..Default::default() };
    let sol = solve_linear(&params, &Claim::from_values("optimal wealth", terminal.clone()), paths, &SolveOptions { store_paths: false, ..Default::default() })?;
    Ok(UtilityResult {
        c,
        c_sample,
        c_bisection,
        budget,
        expected_utility,
        y0_check: Estimate { mean: sol.y0, std_error: sol.y0_std_error },
        gamma_t: gt,
        terminal_wealth: terminal,
    })
}

/// `log X(T)` for the constant-fraction strategy `pi`, from the exact
/// log form of the wealth equation.
pub fn constant_fraction_log_wealth(market: &MarketModel, pi: f64, x0: f64, paths: &PathEnsemble) -> Result<Vec<f64>> {
    require_no_jumps(market, paths)?;
    let mu = Curve::sample(paths.grid(), |t| pi * market.mu.at(t))?;
    let sigma = Curve::sample(paths.grid(), |t| pi * market.sigma.at(t))?;
    let w = stochastic_exponential(paths, &mu, &sigma, &[])?;
    Ok(w.terminal().iter().map(|v| x0.ln() + v.ln()).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskMinResult {
    /// `-Y(0) = -x - int (b0/sigma0)^2 / 2 dt`.
    pub minimal_risk_analytic: f64,
    /// `-x - E[Gamma(T) log Gamma(T)]` by Monte Carlo.
    pub minimal_risk_mc: Estimate,
    pub entropy_analytic: f64,
    pub entropy_mc: Estimate,
    pub y0_hat: f64,
    /// Optimal `Z = b0/sigma0` on the grid.
    pub z_hat: Curve,
    #[serde(skip)]
    pub terminal_wealth: Vec<f64>,
}

/// Minimal entropic risk of terminal wealth in a jump-free market with
/// deterministic coefficients.
pub fn risk_minimize_quadratic(market: &MarketModel, x0: f64, paths: &PathEnsemble) -> Result<RiskMinResult> {
    require_no_jumps(market, paths)?;
    let grid = paths.grid().to_vec();
    let z_hat = Curve::sample(&grid, |t| market.mu.at(t) / market.sigma.at(t))?;
    let theta = z_hat.map(|v| -v);
    let entropy_analytic = market.half_sharpe_integral(0.0);
    let gamma = stochastic_exponential(paths, &Curve::Constant(0.0), &theta, &[])?;
    let entropy_mc = relative_entropy(gamma.terminal())?;
    let y0_hat = x0 + entropy_analytic;
    let terminal_wealth = gamma.terminal().iter().map(|g| y0_hat - g.ln()).collect();
    Ok(RiskMinResult {
        minimal_risk_analytic: -y0_hat,
        minimal_risk_mc: Estimate { mean: -x0 - entropy_mc.mean, std_error: entropy_mc.std_error },
        entropy_analytic,
        entropy_mc,
        y0_hat,
        z_hat,
        terminal_wealth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::simulate;

    fn market() -> MarketModel {
        MarketModel::black_scholes(0.05, 0.2, 1.0, 50)
    }

    #[test]
    fn hamiltonian_specializations() {
        let m = market();
        let zero = ControlProblem::new("zero", 1.0, |_, _, _| 0.0, |_, _, _| 0.0, |_| 0.0);
        let pt = Point { t: 0.3, x: 1.7, y: 0.2, z: -0.4, k: &[], u: 0.9 };
        let adj = Adjoint { lambda: 0.5, p: 1.3, q: -0.8, r: &[] };
        assert_eq!(zero.hamiltonian(&pt, &adj), 0.0);
        let lu = ControlProblem::log_utility(&m, 1.0);
        let want = 0.9 * 1.7 * 0.05 * 1.3 + 0.9 * 1.7 * 0.2 * -0.8;
        assert!((lu.hamiltonian(&pt, &adj) - want).abs() < 1e-15);
        let qr = ControlProblem::quadratic_risk(&m, 1.0);
        let want = want + 0.5 * (-0.5 * 0.16);
        assert!((qr.hamiltonian(&pt, &adj) - want).abs() < 1e-15);
        let d = qr.partials(&pt, &adj);
        assert!((d.u - 1.7 * (0.05 * 1.3 - 0.2 * 0.8)).abs() < 1e-9);
        assert!((d.z - 0.5 * 0.4).abs() < 1e-9);
        qr.check_differentiability(1.0, 50, 3).unwrap();
    }

    #[test]
    fn log_utility_closed_form() {
        let m = market();
        let ens = simulate(&m, 20_000, 4).unwrap();
        let r = utility_optimize(Utility::Log, &m, 2.0, &ens).unwrap();
        assert!((r.c * 2.0 - 1.0).abs() < 1e-15);
        for (x, g) in r.terminal_wealth.iter().zip(&r.gamma_t) {
            assert!((x - 2.0 / g).abs() < 1e-12);
        }
        assert!(r.budget.within(2.0, 3.0));
        assert!(r.y0_check.within(2.0, 3.0));
    }

    #[test]
    fn zero_drift_means_no_investment() {
        let m = MarketModel::black_scholes(0.0, 0.2, 1.0, 20);
        let ens = simulate(&m, 100, 4).unwrap();
        let r = utility_optimize(Utility::Log, &m, 1.5, &ens).unwrap();
        assert!(r.terminal_wealth.iter().all(|&x| x == 1.5));
        let q = risk_minimize_quadratic(&m, 1.0, &ens).unwrap();
        assert_eq!(q.minimal_risk_analytic, -1.0);
    }

    #[test]
    fn power_utility_bisection_matches_closed_form() {
        let m = market();
        let ens = simulate(&m, 20_000, 5).unwrap();
        let r = utility_optimize(Utility::Power { delta: 0.5 }, &m, 1.0, &ens).unwrap();
        assert!((r.c_bisection - r.c).abs() <= 1e-10 * r.c);
        assert!(r.budget.within(1.0, 3.0), "{:?}", r.budget);
        assert!(utility_optimize(Utility::Power { delta: 1.0 }, &m, 1.0, &ens).is_err());
    }

    #[test]
    fn quadratic_risk_values() {
        let m = MarketModel::black_scholes(0.05, 0.2, 1.0, 100);
        let ens = simulate(&m, 50_000, 6).unwrap();
        let r = risk_minimize_quadratic(&m, 1.0, &ens).unwrap();
        assert!((r.minimal_risk_analytic + 1.03125).abs() < 1e-14);
        assert!(r.minimal_risk_mc.within(-1.03125, 3.0), "{:?}", r.minimal_risk_mc);
    }

    #[test]
    fn zero_perturbation_has_zero_derivative() {
        let m = market();
        let ens = simulate(&m, 500, 7).unwrap();
        let p = ControlProblem::log_utility(&m, 1.0);
        let chk = check_necessary(&p, &Control::constant(1.25), &Control::constant(0.0), &ens, 1e-3, &SolveOptions::default()).unwrap();
        assert_eq!(chk.fd_derivative.mean, 0.0);
        assert_eq!(chk.adjoint_derivative.mean, 0.0);
    }

    #[test]
    fn overshooting_the_optimum_lowers_log_utility() {
        let m = market();
        let ens = simulate(&m, 20_000, 8).unwrap();
        let p = ControlProblem::log_utility(&m, 1.0);
        let chk = check_necessary(&p, &Control::constant(1.35), &Control::constant(1.0), &ens, 1e-3, &SolveOptions::default()).unwrap();
        // dJ/dpi = (b0 - pi sigma0^2) T = -0.004
        assert!(chk.fd_derivative.within(-0.004, 3.0), "{:?}", chk.fd_derivative);
        assert!(chk.fd_derivative.mean < 0.0);
        assert!(chk.adjoint_derivative.mean < 0.0);
    }

    #[test]
    fn adjoint_boundary_conditions() {
        let m = market();
        let ens = simulate(&m, 2000, 9).unwrap();
        let p = ControlProblem::quadratic_risk(&m, 1.0);
        let adj = adjoint(&p, &Control::constant(1.25), &ens, &SolveOptions::default()).unwrap();
        // lambda(0) = psi'(Y(0)) = 1 and p(T) = lambda(T) h'(X(T)) = lambda(T)
        for path in 0..2000 {
            assert!((adj.lambda_at(path, 0) - 1.0).abs() < 1e-9);
            assert!((adj.p_at(path, 50) - adj.lambda_at(path, 50)).abs() < 1e-9);
        }
    }
}
