//! Manufacturer/retailer Stackelberg game with delayed demand information,
//! reduced to deterministic conditional demand laws.
//!
//! The demand seen by the retailer at time `t` is Gaussian with mean `m_t`
//! and standard deviation `sd_t`. The follower response comes from a backward
//! ODE for the expected sales `Y`, the leader price from a forward adjoint and
//! a pointwise first-order condition, iterated to a fixed point.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::numerics::{brent, norm_cdf, norm_pdf, norm_quantile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewsvendorSpec {
    /// Demand intercept `K`; prices live in `(S, K)`.
    pub k: f64,
    /// Production cost per unit `M`.
    pub cost: f64,
    /// Salvage price per unit `S`.
    pub salvage: f64,
    /// Demand noise scale.
    pub sigma: f64,
    /// Information delay.
    pub delta: f64,
    pub horizon: f64,
    pub n_steps: usize,
    /// Conditional demand mean `m_t`.
    pub mean: Curve,
    /// Conditional demand standard deviation `sd_t`.
    pub sd: Curve,
}

impl Default for NewsvendorSpec {
    fn default() -> Self {
        NewsvendorSpec {
            k: 20.0,
            cost: 4.0,
            salvage: 1.0,
            sigma: 2.0,
            delta: 0.1,
            horizon: 1.0,
            n_steps: 100,
            mean: Curve::Constant(10.0),
            sd: Curve::Constant(2.0),
        }
    }
}

impl NewsvendorSpec {
    /// Conditional standard deviation `sigma sqrt(delta)` from the delay.
    pub fn with_delay_sd(mut self) -> Self {
        self.sd = Curve::Constant(self.sigma * self.delta.sqrt());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.k, self.cost, self.salvage, self.sigma, self.delta, self.horizon].iter().all(|v| v.is_finite())
            && self.mean.all_finite()
            && self.sd.all_finite();
        if !finite {
            return Err(Error::InvalidModel("newsvendor parameters must be finite".into()));
        }
        if !(self.salvage < self.cost && self.cost < self.k) {
            return Err(Error::InvalidModel(format!(
                "need S < M < K, got S={}, M={}, K={}",
                self.salvage, self.cost, self.k
            )));
        }
        if !(self.horizon > 0.0 && self.delta >= 0.0 && self.delta < self.horizon) {
            return Err(Error::InvalidModel(format!("need 0 <= delta < T, got delta={}, T={}", self.delta, self.horizon)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidModel("n_steps must be positive".into()));
        }
        if self.grid().iter().any(|&t| !(self.sd.at(t) > 0.0)) {
            return Err(Error::InvalidModel("demand standard deviation must be positive".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.horizon * i as f64 / self.n_steps as f64).collect()
    }

    fn check_price(&self, t: f64, w: f64) -> Result<()> {
        if !(w > self.salvage && w < self.k) {
            return Err(Error::Inadmissible(format!("price w({t}) = {w} outside ({}, {})", self.salvage, self.k)));
        }
        Ok(())
    }
}

/// `h_t(x) = P(X_t <= x)` and `f_t(x) = E[X_t; X_t <= x]`.
pub fn h_and_f(spec: &NewsvendorSpec, t: f64, x: f64) -> (f64, f64) {
    let (m, s) = (spec.mean.at(t), spec.sd.at(t));
    if x == f64::INFINITY {
        return (1.0, m);
    }
    if x == f64::NEG_INFINITY {
        return (0.0, 0.0);
    }
    let z = (x - m) / s;
    let h = norm_cdf(z);
    (h, m * h - s * norm_pdf(z))
}

/// `h_t^{-1}(a)`.
pub fn h_inverse(spec: &NewsvendorSpec, t: f64, a: f64) -> f64 {
    spec.mean.at(t) + spec.sd.at(t) * norm_quantile(a)
}

/// Expected sales `E[min(X_t, q)] = q (1 - h_t(q)) + f_t(q)`.
pub fn expected_sales(spec: &NewsvendorSpec, t: f64, q: f64) -> f64 {
    let (h, f) = h_and_f(spec, t, q);
    if q == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    q * (1.0 - h) + f
}

/// Order quantity for a retail margin `y = R - w`: `h_t^{-1}(y / (y + w - S))`.
pub fn order_quantity(spec: &NewsvendorSpec, t: f64, w: f64, margin: f64) -> f64 {
    h_inverse(spec, t, margin / (margin + w - spec.salvage))
}

/// `F_t^{(w)}(y)`: expected sales when the retail margin is `y`.
pub fn sales_of_margin(spec: &NewsvendorSpec, t: f64, w: f64, y: f64) -> f64 {
    let q = order_quantity(spec, t, w, y);
    if q == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if q == f64::INFINITY {
        return spec.mean.at(t);
    }
    let frac = (w - spec.salvage) / (y + w - spec.salvage);
    q * frac + h_and_f(spec, t, q).1
}

const MAX_BRACKET_DOUBLINGS: usize = 200;

/// `F_t^{-1}(w, Y)`: the margin whose expected sales equal `target`, by bisection
/// on a bracket grown geometrically from `[0, K]`.
pub fn margin_of_sales(spec: &NewsvendorSpec, t: f64, w: f64, target: f64) -> Result<f64> {
    let fail = |why: &str| Error::Bracket(format!("F^-1 at t={t}, w={w}, Y={target}: {why}"));
    if !target.is_finite() {
        return Err(fail("target is not finite"));
    }
    let g = |y: f64| sales_of_margin(spec, t, w, y) - target;
    let mut hi = spec.k;
    let mut n = 0;
    while !(g(hi) > 0.0) {
        hi *= 2.0;
        n += 1;
        if n > MAX_BRACKET_DOUBLINGS || !hi.is_finite() {
            return Err(fail("expected sales cannot reach the target"));
        }
    }
    let mut lo = spec.k;
    n = 0;
    while !(g(lo) < 0.0) {
        lo *= 0.5;
        n += 1;
        if n > 2000 || lo == 0.0 {
            return Err(fail("no margin small enough"));
        }
    }
    if lo > hi {
        return Err(fail("bracket is inverted"));
    }
    // bisect to the last representable midpoint
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn lerp(grid: &[f64], v: &[f64], t: f64) -> f64 {
    if t <= grid[0] {
        return v[0];
    }
    let n = grid.len() - 1;
    if t >= grid[n] {
        return v[n];
    }
    let i = grid.partition_point(|&s| s <= t) - 1;
    let a = (t - grid[i]) / (grid[i + 1] - grid[i]);
    v[i] + a * (v[i + 1] - v[i])
}

/// Follower curves on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FollowerResponse {
    pub grid: Vec<f64>,
    pub w: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub y: Vec<f64>,
    /// `max_t |h_t(Q) - (R - w)/(R - S)|`.
    pub foc_residual: f64,
    /// `max_t |E[min(X_t, Q_t)] - Y_t|`.
    pub sales_residual: f64,
    /// `max_t |Y_t - int_t^T F^{-1}(w_s, Y_s) ds|` by composite Simpson on the grid.
    pub integral_residual: f64,
}

/// Solves `Y' = -F^{-1}(w, Y)`, `Y(T) = 0` by classical RK4 backward in time
/// and reads off the margin `R - w` and the order quantity.
pub fn follower_response(spec: &NewsvendorSpec, w: &[f64]) -> Result<FollowerResponse> {
    spec.validate()?;
    let grid = spec.grid();
    let n = spec.n_steps;
    if w.len() != n + 1 {
        return Err(Error::GridMismatch(format!("price curve has {} values for {} grid points", w.len(), n + 1)));
    }
    for (&t, &wi) in grid.iter().zip(w) {
        spec.check_price(t, wi)?;
    }
    let dt = spec.dt();
    let rhs = |t: f64, y: f64| -> Result<f64> { Ok(-margin_of_sales(spec, t, lerp(&grid, w, t), y)?) };
    let mut y = vec![0.0; n + 1];
    for i in (0..n).rev() {
        let (t, yi) = (grid[i + 1], y[i + 1]);
        let h = -dt;
        let k1 = rhs(t, yi)?;
        let k2 = rhs(t + 0.5 * h, yi + 0.5 * h * k1)?;
        let k3 = rhs(t + 0.5 * h, yi + 0.5 * h * k2)?;
        let k4 = rhs(t + h, yi + h * k3)?;
        y[i] = yi + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !y[i].is_finite() {
            return Err(Error::NonFinite { what: "expected sales Y".into(), step: i });
        }
    }
    let margins: Vec<f64> = (0..=n).map(|i| margin_of_sales(spec, grid[i], w[i], y[i])).collect::<Result<_>>()?;
    let q: Vec<f64> = (0..=n).map(|i| order_quantity(spec, grid[i], w[i], margins[i])).collect();
    let r: Vec<f64> = w.iter().zip(&margins).map(|(a, b)| a + b).collect();

    let foc_residual = (0..=n)
        .map(|i| (h_and_f(spec, grid[i], q[i]).0 - margins[i] / (margins[i] + w[i] - spec.salvage)).abs())
        .fold(0.0, f64::max);
    let sales_residual = (0..=n).map(|i| (expected_sales(spec, grid[i], q[i]) - y[i]).abs()).fold(0.0, f64::max);
    let integral_residual = (0..=n).map(|i| (y[i] - tail_simpson(&margins[i..], dt)).abs()).fold(0.0, f64::max);
    Ok(FollowerResponse { grid, w: w.to_vec(), q, r, y, foc_residual, sales_residual, integral_residual })
}

// composite Simpson over equally spaced samples, trapezoid on a leftover cell
fn tail_simpson(v: &[f64], dt: f64) -> f64 {
    let cells = v.len() - 1;
    let even = cells - cells % 2;
    let mut acc = 0.0;
    for j in (0..even).step_by(2) {
        acc += dt / 3.0 * (v[j] + 4.0 * v[j + 1] + v[j + 2]);
    }
    if cells % 2 == 1 {
        acc += 0.5 * dt * (v[cells - 1] + v[cells]);
    }
    acc
}

/// Order quantity as a function of the price and the expected sales `Y`.
fn order_of_sales(spec: &NewsvendorSpec, t: f64, w: f64, y: f64) -> Result<f64> {
    let margin = margin_of_sales(spec, t, w, y)?;
    Ok(order_quantity(spec, t, w, margin))
}

/// Leader Hamiltonian `(w - M) Q(w, y) + lambda F^{-1}(w, y)` (the state
/// adjoints vanish).
pub fn leader_hamiltonian(spec: &NewsvendorSpec, t: f64, w: f64, y: f64, lambda: f64) -> Result<f64> {
    let margin = margin_of_sales(spec, t, w, y)?;
    Ok((w - spec.cost) * order_quantity(spec, t, w, margin) + lambda * margin)
}

fn price_step(spec: &NewsvendorSpec) -> f64 {
    1e-5 * (spec.k - spec.salvage)
}

fn sales_step(y: f64) -> f64 {
    1e-6 * (1.0 + y.abs())
}

/// Left side of the leader's first-order condition
/// `(w - M) dQ/dw + Q + lambda dF^{-1}/dw`, derivatives by central differences.
pub fn leader_foc(spec: &NewsvendorSpec, t: f64, w: f64, y: f64, lambda: f64) -> Result<f64> {
    let h = price_step(spec);
    let dq = (order_of_sales(spec, t, w + h, y)? - order_of_sales(spec, t, w - h, y)?) / (2.0 * h);
    let dm = (margin_of_sales(spec, t, w + h, y)? - margin_of_sales(spec, t, w - h, y)?) / (2.0 * h);
    Ok((w - spec.cost) * dq + order_of_sales(spec, t, w, y)? + lambda * dm)
}

/// `dH/dy` by central differences.
fn hamiltonian_dy(spec: &NewsvendorSpec, t: f64, w: f64, y: f64, lambda: f64) -> Result<f64> {
    let h = sales_step(y);
    Ok((leader_hamiltonian(spec, t, w, y + h, lambda)? - leader_hamiltonian(spec, t, w, y - h, lambda)?) / (2.0 * h))
}

/// Leader profit `int_delta^T (w - M) Q dt` on the follower response, by the
/// trapezoid rule on the grid with the first cell clipped at `delta`.
pub fn leader_profit(spec: &NewsvendorSpec, w: &[f64]) -> Result<f64> {
    let resp = follower_response(spec, w)?;
    Ok(profit_of(spec, &resp))
}

fn profit_of(spec: &NewsvendorSpec, resp: &FollowerResponse) -> f64 {
    let g = &resp.grid;
    let v: Vec<f64> = resp.w.iter().zip(&resp.q).map(|(w, q)| (w - spec.cost) * q).collect();
    let mut acc = 0.0;
    for i in 0..g.len() - 1 {
        let (a, b) = (g[i].max(spec.delta), g[i + 1]);
        if b <= a {
            continue;
        }
        acc += 0.5 * (b - a) * (lerp(g, &v, a) + lerp(g, &v, b));
    }
    acc
}

/// Everything the leader iteration returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackelbergSolution {
    pub grid: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Largest `|h_t(Q) - (R - w)/(R - S)|`.
    pub foc_residual: f64,
    pub sales_residual: f64,
    pub integral_residual: f64,
    /// Leader first-order condition at the returned price, per grid point.
    pub leader_residual: Vec<f64>,
    /// Grid points where the first-order condition had no root in `(M, K)` and
    /// the price maximizing the Hamiltonian on `[M, K]` was used instead.
    pub boundary_steps: Vec<usize>,
    pub profit: f64,
    pub sweeps: usize,
    pub history: Vec<f64>,
}

impl StackelbergSolution {
    pub fn max_leader_residual(&self) -> f64 {
        self.leader_residual.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    /// CSV with columns `t,w,Q,R,Y,lambda`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,w,Q,R,Y,lambda")?;
        for i in 0..self.grid.len() {
            writeln!(
                out,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.grid[i], self.w_hat[i], self.q_hat[i], self.r_hat[i], self.y[i], self.lambda[i]
            )?;
        }
        Ok(())
    }
}

/// Options for the leader iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeaderOptions {
    pub damping: f64,
    pub max_sweeps: usize,
    pub tolerance: f64,
}

impl Default for LeaderOptions {
    fn default() -> Self {
        LeaderOptions { damping: 0.5, max_sweeps: 200, tolerance: 1e-8 }
    }
}

// lambda' = dH/dy, lambda(0) = 0, RK4 with w and Y interpolated linearly
fn forward_adjoint(spec: &NewsvendorSpec, grid: &[f64], w: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = grid.len() - 1;
    let dt = spec.dt();
    let rhs = |t: f64, l: f64| hamiltonian_dy(spec, t, lerp(grid, w, t), lerp(grid, y, t), l);
    let mut lambda = vec![0.0; n + 1];
    for i in 0..n {
        let (t, l) = (grid[i], lambda[i]);
        let k1 = rhs(t, l)?;
        let k2 = rhs(t + 0.5 * dt, l + 0.5 * dt * k1)?;
        let k3 = rhs(t + 0.5 * dt, l + 0.5 * dt * k2)?;
        let k4 = rhs(t + dt, l + dt * k3)?;
        lambda[i + 1] = l + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(lambda)
}

fn best_price(spec: &NewsvendorSpec, t: f64, y: f64, lambda: f64) -> Result<(f64, bool)> {
    let eps = 1e-6 * (spec.k - spec.cost);
    let (lo, hi) = (spec.cost + eps, spec.k - eps);
    let foc = |w: f64| leader_foc(spec, t, w, y, lambda).unwrap_or(f64::NAN);
    match brent(foc, lo, hi, 1e-12, 200) {
        Ok(w) => Ok((w, false)),
        Err(Error::Bracket(_)) => {
            // no interior root: take the better end of [M, K] or a golden-section maximum
            let ham = |w: f64| leader_hamiltonian(spec, t, w, y, lambda).unwrap_or(f64::NEG_INFINITY);
            let (mut a, mut b) = (lo, hi);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..100 {
                let (c, d) = (b - g * (b - a), a + g * (b - a));
                if ham(c) >= ham(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let inner = 0.5 * (a + b);
            let best = [lo, inner, hi].into_iter().fold((f64::NAN, f64::NEG_INFINITY), |acc, w| {
                let v = ham(w);
                if v > acc.1 {
                    (w, v)
                } else {
                    acc
                }
            });
            if !best.1.is_finite() {
                return Err(Error::NonFinite { what: format!("leader Hamiltonian at t={t}"), step: 0 });
            }
            Ok((best.0, true))
        }
        Err(e) => Err(e),
    }
}

/// Iterates `w -> (Y, Q, R) -> lambda -> w` with damping until the price
/// curve moves less than the tolerance in sup norm.
pub fn leader_price(spec: &NewsvendorSpec, opts: &LeaderOptions) -> Result<StackelbergSolution> {
    spec.validate()?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidArgument(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let grid = spec.grid();
    let n = spec.n_steps;
    let mut w = vec![0.5 * (spec.cost + spec.k); n + 1];
    let mut history = Vec::new();
    for sweep in 1..=opts.max_sweeps {
        let resp = follower_response(spec, &w)?;
        let lambda = forward_adjoint(spec, &grid, &w, &resp.y)?;
        let mut target = vec![0.0; n + 1];
        for i in 0..=n {
            target[i] = best_price(spec, grid[i], resp.y[i], lambda[i])?.0;
        }
        let next: Vec<f64> = w.iter().zip(&target).map(|(a, b)| (1.0 - opts.damping) * a + opts.damping * b).collect();
        let change = next.iter().zip(&w).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
        history.push(change);
        w = next;
        if change <= opts.tolerance {
            let resp = follower_response(spec, &w)?;
            let lambda = forward_adjoint(spec, &grid, &w, &resp.y)?;
            let mut leader_residual = Vec::with_capacity(n + 1);
            let mut boundary_steps = Vec::new();
            for i in 0..=n {
                leader_residual.push(leader_foc(spec, grid[i], w[i], resp.y[i], lambda[i])?);
                if best_price(spec, grid[i], resp.y[i], lambda[i])?.1 {
                    boundary_steps.push(i);
                }
            }
            let profit = profit_of(spec, &resp);
            return Ok(StackelbergSolution {
                grid,
                w_hat: w,
                q_hat: resp.q,
                r_hat: resp.r,
                y: resp.y,
                lambda,
                foc_residual: resp.foc_residual,
                sales_residual: resp.sales_residual,
                integral_residual: resp.integral_residual,
                leader_residual,
                boundary_steps,
                profit,
                sweeps: sweep,
                history,
            });
        }
    }
    Err(Error::FixedPoint { sweeps: opts.max_sweeps, history })
}

/// Leader profit at the solution against a parallel shift of the price curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftCheck {
    pub shift: f64,
    /// `None` when the shifted curve leaves `(S, K)`.
    pub profit: Option<f64>,
    pub reason: Option<String>,
    pub dominated: bool,
}

pub fn profit_shift(spec: &NewsvendorSpec, sol: &StackelbergSolution, shift: f64) -> ShiftCheck {
    let w: Vec<f64> = sol.w_hat.iter().map(|v| v + shift).collect();
    match leader_profit(spec, &w) {
        Ok(p) => ShiftCheck { shift, profit: Some(p), reason: None, dominated: sol.profit >= p },
        Err(e) => ShiftCheck { shift, profit: None, reason: Some(e.to_string()), dominated: matches!(e, Error::Inadmissible(_)) },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::adaptive_simpson;

    #[test]
    fn h_f_limits_and_quadrature() {
        let spec = NewsvendorSpec::default();
        assert_eq!(h_and_f(&spec, 0.0, 10.0).0, 0.5);
        let (h, f) = h_and_f(&spec, 0.0, 1e6);
        assert_eq!(h, 1.0);
        assert!((f - 10.0).abs() < 1e-12);
        let dens = |x: f64| norm_pdf((x - 10.0) / 2.0) / 2.0;
        let hq = adaptive_simpson(&dens, -40.0, 12.0, 1e-13);
        let fq = adaptive_simpson(&|x: f64| x * dens(x), -40.0, 12.0, 1e-13);
        let (h, f) = h_and_f(&spec, 0.0, 12.0);
        assert!((h - hq).abs() < 1e-8, "{h} {hq}");
        assert!((f - fq).abs() < 1e-8, "{f} {fq}");
    }

    #[test]
    fn margin_inverse_round_trips() {
        let spec = NewsvendorSpec::default();
        for (w, y) in [(8.0, 3.0), (5.0, 0.5), (19.0, 40.0)] {
            let s = sales_of_margin(&spec, 0.3, w, y);
            let back = margin_of_sales(&spec, 0.3, w, s).unwrap();
            assert!((back - y).abs() < 1e-9 * y.max(1.0), "{back} vs {y}");
            // F is expected sales at the implied order quantity
            let q = order_quantity(&spec, 0.3, w, y);
            assert!((expected_sales(&spec, 0.3, q) - s).abs() < 1e-12);
        }
        assert!(matches!(margin_of_sales(&spec, 0.0, 8.0, 10.5), Err(Error::Bracket(_))));
    }

    #[test]
    fn follower_at_constant_price() {
        let spec = NewsvendorSpec::default();
        let w = vec![8.0; spec.n_steps + 1];
        let r = follower_response(&spec, &w).unwrap();
        assert_eq!(*r.y.last().unwrap(), 0.0);
        assert!(r.foc_residual <= 1e-8, "{}", r.foc_residual);
        assert!(r.sales_residual <= 1e-6, "{}", r.sales_residual);
        assert!(r.integral_residual <= 1e-6, "{}", r.integral_residual);
        for (rr, ww) in r.r.iter().zip(&r.w) {
            assert!(rr > ww);
        }
        assert!(follower_response(&spec, &vec![0.5; spec.n_steps + 1]).is_err());
    }

    #[test]
    fn deterministic_demand_orders_the_mean() {
        for sd in [1e-3, 1e-6, 1e-9] {
            let spec = NewsvendorSpec { sd: Curve::Constant(sd), ..Default::default() };
            let q = order_quantity(&spec, 0.5, 8.0, 2.0);
            assert!((q - 10.0).abs() < 10.0 * sd);
        }
    }

    #[test]
    fn leader_iteration_runs() {
        let spec = NewsvendorSpec { n_steps: 20, ..Default::default() };
        let sol = leader_price(&spec, &LeaderOptions::default()).unwrap();
        assert!(sol.foc_residual <= 1e-8);
        assert_eq!(sol.lambda[0], 0.0);
        assert!(sol.w_hat.iter().all(|&w| w > spec.cost && w < spec.k));
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 22);
    }
}
