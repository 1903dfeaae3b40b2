//! Ito-Levy market noise: Brownian increments plus Poisson counts for a
//! finite-atom Levy measure, on a uniform grid.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curve::Curve;
use crate::error::{Error, Result};
use crate::numerics::Estimate;

/// One atom `lambda * delta_zeta` of the Levy measure with its relative jump amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub zeta: f64,
    pub lambda: f64,
    pub gamma: Curve,
}

impl Atom {
    pub fn new(zeta: f64, lambda: f64, gamma: impl Into<Curve>) -> Self {
        Atom { zeta, lambda, gamma: gamma.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketModel {
    pub horizon: f64,
    pub n_steps: usize,
    pub mu: Curve,
    pub sigma: Curve,
    pub atoms: Vec<Atom>,
    pub r: Curve,
}

impl Default for MarketModel {
    fn default() -> Self {
        MarketModel::black_scholes(0.05, 0.2, 1.0, 100)
    }
}

impl MarketModel {
    /// A continuous market with constant drift and volatility and `r = 0`.
    pub fn black_scholes(mu: f64, sigma: f64, horizon: f64, n_steps: usize) -> Self {
        MarketModel {
            horizon,
            n_steps,
            mu: Curve::Constant(mu),
            sigma: Curve::Constant(sigma),
            atoms: Vec::new(),
            r: Curve::Constant(0.0),
        }
    }

    pub fn with_atom(mut self, atom: Atom) -> Self {
        self.atoms.push(atom);
        self
    }

    pub fn with_rate(mut self, r: impl Into<Curve>) -> Self {
        self.r = r.into();
        self
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        uniform_grid(self.horizon, self.n_steps)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.lambda).collect()
    }

    pub fn gammas(&self) -> Vec<Curve> {
        self.atoms.iter().map(|a| a.gamma.clone()).collect()
    }

    pub fn has_jumps(&self) -> bool {
        self.atoms.iter().any(|a| a.lambda > 0.0 && !a.gamma.is_zero())
    }

    /// `int_s^T (mu/sigma)^2 / 2 dt` by Gauss-Legendre on every grid cell,
    /// also split at the knots of `mu` and `sigma`.
    pub fn half_sharpe_integral(&self, s: f64) -> f64 {
        let mut cuts = self.grid();
        cuts.extend(self.mu.breakpoints_within(s, self.horizon));
        cuts.extend(self.sigma.breakpoints_within(s, self.horizon));
        crate::numerics::integrate(
            |t| {
                let th = self.mu.at(t) / self.sigma.at(t);
                0.5 * th * th
            },
            s,
            self.horizon,
            &cuts,
            1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidModel("n_steps must be positive".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {}", self.horizon)));
        }
        for (name, c) in [("mu", &self.mu), ("sigma", &self.sigma), ("r", &self.r)] {
            if !c.all_finite() {
                return Err(Error::InvalidModel(format!("{name} has non-finite values")));
            }
        }
        let grid = self.grid();
        if let Some(&t) = grid.iter().find(|&&t| self.sigma.at(t) <= 0.0) {
            return Err(Error::InvalidModel(format!("sigma must be positive, sigma({t}) = {}", self.sigma.at(t))));
        }
        for (j, a) in self.atoms.iter().enumerate() {
            if !(a.lambda.is_finite() && a.lambda >= 0.0) {
                return Err(Error::InvalidModel(format!("atom {j}: intensity {} must be >= 0", a.lambda)));
            }
            if !a.zeta.is_finite() || a.zeta == 0.0 {
                return Err(Error::InvalidModel(format!("atom {j}: mark must be finite and non-zero")));
            }
            if !a.gamma.all_finite() {
                return Err(Error::InvalidModel(format!("atom {j}: gamma has non-finite values")));
            }
            if let Some(&t) = grid.iter().find(|&&t| a.gamma.at(t) <= -1.0) {
                return Err(Error::JumpCoefficient { atom: j, t, value: a.gamma.at(t) });
            }
            if self.atoms[..j].iter().any(|b| b.zeta == a.zeta) {
                return Err(Error::InvalidModel(format!("atom {j}: duplicate mark {}", a.zeta)));
            }
        }
        Ok(())
    }
}

pub(crate) fn uniform_grid(horizon: f64, n_steps: usize) -> Vec<f64> {
    (0..=n_steps)
        .map(|i| if i == n_steps { horizon } else { horizon * i as f64 / n_steps as f64 })
        .collect()
}

/// Brownian increments and Poisson counts, stored step-major so that a
/// backward sweep touches contiguous memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: Vec<f64>,
    dt: f64,
    n_paths: usize,
    lambdas: Vec<f64>,
    db: Vec<f64>,
    counts: Vec<u32>,
    seed: u64,
}

/// Simulates `n_paths` paths of the driving noise.
///
/// Path `i` draws from its own ChaCha stream `i` under the master seed, so
/// a path does not depend on how many others are simulated.
pub fn simulate(model: &MarketModel, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    model.validate()?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let n = model.n_steps;
    let dt = model.dt();
    let sqrt_dt = dt.sqrt();
    let lambdas = model.lambdas();
    let n_atoms = lambdas.len();
    let poissons: Vec<Option<Poisson<f64>>> = lambdas
        .iter()
        .map(|&l| if l > 0.0 { Poisson::new(l * dt).ok() } else { None })
        .collect();

    let mut db = vec![0.0; n * n_paths];
    let mut counts = vec![0u32; n * n_paths * n_atoms];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for path in 0..n_paths {
        rng.set_stream(path as u64);
        rng.set_word_pos(0);
        for step in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            db[step * n_paths + path] = z * sqrt_dt;
        }
        for (j, p) in poissons.iter().enumerate() {
            if let Some(p) = p {
                for step in 0..n {
                    counts[(step * n_paths + path) * n_atoms + j] = p.sample(&mut rng) as u32;
                }
            }
        }
    }
    Ok(PathEnsemble {
        grid: model.grid(),
        dt,
        n_paths,
        lambdas,
        db,
        counts,
        seed,
    })
}

impl PathEnsemble {
    /// Builds an ensemble from explicit increments, laid out `[step][path]`
    /// and `[step][path][atom]`.
    pub fn from_increments(
        horizon: f64,
        n_steps: usize,
        n_paths: usize,
        lambdas: Vec<f64>,
        db: Vec<f64>,
        counts: Vec<u32>,
    ) -> Result<Self> {
        if n_steps == 0 || n_paths == 0 {
            return Err(Error::InvalidArgument("need at least one step and one path".into()));
        }
        if db.len() != n_steps * n_paths || counts.len() != n_steps * n_paths * lambdas.len() {
            return Err(Error::GridMismatch("increment arrays do not match dimensions".into()));
        }
        Ok(PathEnsemble {
            grid: uniform_grid(horizon, n_steps),
            dt: horizon / n_steps as f64,
            n_paths,
            lambdas,
            db,
            counts,
            seed: 0,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn n_atoms(&self) -> usize {
        self.lambdas.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn db(&self, path: usize, step: usize) -> f64 {
        self.db[step * self.n_paths + path]
    }

    /// Brownian increments of every path over one step.
    #[inline]
    pub fn db_step(&self, step: usize) -> &[f64] {
        &self.db[step * self.n_paths..(step + 1) * self.n_paths]
    }

    #[inline]
    pub fn count(&self, path: usize, step: usize, atom: usize) -> u32 {
        self.counts[(step * self.n_paths + path) * self.lambdas.len() + atom]
    }

    /// Compensated increment `dN - lambda dt`.
    #[inline]
    pub fn dn_tilde(&self, path: usize, step: usize, atom: usize) -> f64 {
        self.count(path, step, atom) as f64 - self.lambdas[atom] * self.dt
    }

    /// `W(t_step)` for every path.
    pub fn brownian_at(&self, step: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.n_paths];
        for s in 0..step {
            for (wi, d) in w.iter_mut().zip(self.db_step(s)) {
                *wi += d;
            }
        }
        w
    }

    /// Cumulative jump counts `N_j(t_step)` for every path, `[path][atom]`.
    pub fn counts_at(&self, step: usize) -> Vec<f64> {
        let na = self.n_atoms();
        let mut n = vec![0.0; self.n_paths * na];
        for s in 0..step {
            let base = s * self.n_paths * na;
            for (acc, &c) in n.iter_mut().zip(&self.counts[base..base + self.n_paths * na]) {
                *acc += c as f64;
            }
        }
        n
    }

    /// A view of one path, for evaluating claims.
    pub fn path(&self, path: usize) -> PathView<'_> {
        PathView { ens: self, path }
    }

    /// One CSV row per path-step: `path,t,dB,count_0,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "path,t,dB")?;
        for j in 0..self.n_atoms() {
            write!(out, ",count_{j}")?;
        }
        writeln!(out)?;
        for p in 0..self.n_paths {
            for s in 0..self.n_steps() {
                write!(out, "{p},{:.16e},{:.16e}", self.grid[s], self.db(p, s))?;
                for j in 0..self.n_atoms() {
                    write!(out, ",{}", self.count(p, s, j))?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Read-only access to a single simulated path.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    ens: &'a PathEnsemble,
    path: usize,
}

impl<'a> PathView<'a> {
    pub fn index(&self) -> usize {
        self.path
    }

    pub fn ensemble(&self) -> &'a PathEnsemble {
        self.ens
    }

    pub fn db(&self, step: usize) -> f64 {
        self.ens.db(self.path, step)
    }

    pub fn count(&self, step: usize, atom: usize) -> u32 {
        self.ens.count(self.path, step, atom)
    }

    /// `W(t_step)`.
    pub fn brownian(&self, step: usize) -> f64 {
        (0..step).map(|s| self.db(s)).sum()
    }

    /// `N_j(t_step)`.
    pub fn jumps(&self, step: usize, atom: usize) -> f64 {
        (0..step).map(|s| self.count(s, atom) as f64).sum()
    }

    pub fn terminal_brownian(&self) -> f64 {
        self.brownian(self.ens.n_steps())
    }

    pub fn terminal_jumps(&self, atom: usize) -> f64 {
        self.jumps(self.ens.n_steps(), atom)
    }
}

/// Girsanov pair `(theta0(t), theta1_j(t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub theta0: Curve,
    #[serde(default)]
    pub theta1: Vec<Curve>,
}

impl Scenario {
    pub fn identity(n_atoms: usize) -> Self {
        Scenario { theta0: Curve::Constant(0.0), theta1: vec![Curve::Constant(0.0); n_atoms] }
    }

    pub fn diffusion(theta0: f64, n_atoms: usize) -> Self {
        Scenario { theta0: Curve::Constant(theta0), theta1: vec![Curve::Constant(0.0); n_atoms] }
    }

    pub fn validate(&self, grid: &[f64], n_atoms: usize) -> Result<()> {
        if self.theta1.len() != n_atoms {
            return Err(Error::GridMismatch(format!(
                "scenario has {} jump components, ensemble has {n_atoms} atoms",
                self.theta1.len()
            )));
        }
        if !self.theta0.all_finite() || self.theta1.iter().any(|c| !c.all_finite()) {
            return Err(Error::InvalidArgument("scenario has non-finite values".into()));
        }
        check_jump_coefficients(&self.theta1, grid)
    }
}

fn check_jump_coefficients(gamma: &[Curve], grid: &[f64]) -> Result<()> {
    for (j, g) in gamma.iter().enumerate() {
        for &t in grid {
            let v = g.at(t);
            if !(v > -1.0) {
                return Err(Error::JumpCoefficient { atom: j, t, value: v });
            }
        }
    }
    Ok(())
}

/// A positive process sampled on the grid, stored `[step][path]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridProcess {
    n_paths: usize,
    values: Vec<f64>,
}

impl GridProcess {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() / self.n_paths - 1
    }

    #[inline]
    pub fn at(&self, path: usize, step: usize) -> f64 {
        self.values[step * self.n_paths + path]
    }

    pub fn step(&self, step: usize) -> &[f64] {
        &self.values[step * self.n_paths..(step + 1) * self.n_paths]
    }

    pub fn terminal(&self) -> &[f64] {
        self.step(self.n_steps())
    }
}

const OVERFLOW_GUARD: f64 = 1e300;

/// Stochastic exponential of `alpha dt + beta dB + sum_j gamma_j dN~_j`,
/// built from the exact log form with left-point coefficients on each step.
pub fn stochastic_exponential(
    paths: &PathEnsemble,
    alpha: &Curve,
    beta: &Curve,
    gamma: &[Curve],
) -> Result<GridProcess> {
    if gamma.len() != paths.n_atoms() {
        return Err(Error::GridMismatch(format!(
            "{} jump coefficients for {} atoms",
            gamma.len(),
            paths.n_atoms()
        )));
    }
    check_jump_coefficients(gamma, paths.grid())?;
    let n = paths.n_steps();
    let np = paths.n_paths();
    let dt = paths.dt();
    let lambdas = paths.lambdas();
    let mut log_g = vec![0.0; np];
    let mut values = Vec::with_capacity((n + 1) * np);
    values.extend(std::iter::repeat(1.0).take(np));
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for step in 0..n {
        let t = paths.grid()[step];
        let a = alpha.at(t);
        let b = beta.at(t);
        let g: Vec<f64> = gamma.iter().map(|c| c.at(t)).collect();
        let log1p: Vec<f64> = g.iter().map(|v| v.ln_1p()).collect();
        let drift = (a - 0.5 * b * b) * dt - g.iter().zip(lambdas).map(|(gj, l)| gj * l * dt).sum::<f64>();
        let dbs = paths.db_step(step);
        for p in 0..np {
            let mut inc = b * dbs[p] + drift;
            for j in 0..g.len() {
                let c = paths.count(p, step, j);
                if c > 0 {
                    inc += c as f64 * log1p[j];
                }
            }
            log_g[p] += inc;
            lo = lo.min(log_g[p]);
            hi = hi.max(log_g[p]);
        }
        values.extend(log_g.iter().map(|l| l.exp()));
    }
    if !(lo.is_finite() && hi.is_finite()) || hi - lo > OVERFLOW_GUARD.ln() {
        return Err(Error::IllConditioned { ratio: (hi - lo).exp() });
    }
    Ok(GridProcess { n_paths: np, values })
}

/// Density process `M_theta` of the measure change given by `scenario`.
pub fn girsanov_density(paths: &PathEnsemble, scenario: &Scenario) -> Result<GridProcess> {
    scenario.validate(paths.grid(), paths.n_atoms())?;
    stochastic_exponential(paths, &Curve::Constant(0.0), &scenario.theta0, &scenario.theta1)
}

/// Monte Carlo estimate of `E[M log M]` from terminal density samples.
pub fn relative_entropy(density_t: &[f64]) -> Result<Estimate> {
    if density_t.is_empty() {
        return Err(Error::InvalidArgument("no density samples".into()));
    }
    if let Some(&m) = density_t.iter().find(|&&m| !(m > 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument(format!("density samples must be positive, got {m}")));
    }
    Ok(Estimate::from_iter(density_t.iter().map(|&m| m * m.ln())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jump_model(lambda: f64) -> MarketModel {
        MarketModel::black_scholes(0.05, 0.2, 1.0, 100).with_atom(Atom::new(1.0, lambda, 0.1))
    }

    #[test]
    fn rejects_bad_models() {
        let mut m = MarketModel::black_scholes(0.05, 0.2, 1.0, 0);
        assert!(simulate(&m, 10, 1).is_err());
        m.n_steps = 10;
        m.sigma = Curve::Constant(0.0);
        assert!(matches!(m.validate(), Err(Error::InvalidModel(_))));
        m.sigma = Curve::Constant(f64::NAN);
        assert!(m.validate().is_err());
        let dup = jump_model(1.0).with_atom(Atom::new(1.0, 1.0, 0.0));
        assert!(dup.validate().is_err());
        let crash = MarketModel::black_scholes(0.05, 0.2, 1.0, 4).with_atom(Atom::new(1.0, 1.0, -1.0));
        assert!(matches!(crash.validate(), Err(Error::JumpCoefficient { .. })));
        assert!(simulate(&jump_model(1.0), 0, 1).is_err());
    }

    #[test]
    fn brownian_variance_matches_dt() {
        let m = MarketModel::black_scholes(0.0, 0.2, 1.0, 1);
        let ens = simulate(&m, 100_000, 42).unwrap();
        let sq: Vec<f64> = ens.db_step(0).iter().map(|d| d * d).collect();
        let est = Estimate::from_samples(&sq);
        assert!(est.within(1.0, 3.0), "{est:?}");
        let mean = Estimate::from_samples(ens.db_step(0));
        assert!(mean.within(0.0, 3.0));
    }

    #[test]
    fn zero_intensity_gives_no_jumps() {
        let ens = simulate(&jump_model(0.0), 500, 3).unwrap();
        for p in 0..500 {
            for s in 0..100 {
                assert_eq!(ens.count(p, s, 0), 0);
            }
        }
    }

    #[test]
    fn poisson_mean_total_count() {
        let ens = simulate(&jump_model(2.0), 100_000, 11).unwrap();
        let totals: Vec<f64> = (0..ens.n_paths()).map(|p| ens.path(p).terminal_jumps(0)).collect();
        let est = Estimate::from_samples(&totals);
        assert!(est.within(2.0, 3.0), "{est:?}");
        // Poisson variance equals its mean
        let var = crate::numerics::sample_variance(&totals);
        assert!((var - 2.0).abs() < 0.05);
    }

    #[test]
    fn paths_do_not_depend_on_ensemble_size() {
        let m = jump_model(3.0);
        let small = simulate(&m, 5, 99).unwrap();
        let big = simulate(&m, 50, 99).unwrap();
        for p in 0..5 {
            for s in 0..100 {
                assert_eq!(small.db(p, s).to_bits(), big.db(p, s).to_bits());
                assert_eq!(small.count(p, s, 0), big.count(p, s, 0));
            }
        }
        assert_eq!(simulate(&m, 50, 99).unwrap(), big);
        assert_ne!(simulate(&m, 50, 100).unwrap(), big);
    }

    #[test]
    fn exponential_special_cases() {
        let ens = simulate(&jump_model(1.0), 200, 5).unwrap();
        let zero = Curve::Constant(0.0);
        let g = stochastic_exponential(&ens, &zero, &zero, &[zero.clone()]).unwrap();
        assert!(g.terminal().iter().all(|&v| v == 1.0));
        let g = stochastic_exponential(&ens, &Curve::Constant(0.05), &zero, &[zero.clone()]).unwrap();
        for &v in g.terminal() {
            assert!((v - 0.05f64.exp()).abs() < 1e-14);
        }
        let bad = stochastic_exponential(&ens, &zero, &zero, &[Curve::Constant(-1.0)]);
        assert!(matches!(bad, Err(Error::JumpCoefficient { atom: 0, .. })));
    }

    #[test]
    fn driftless_exponential_is_a_martingale() {
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 50), 100_000, 8).unwrap();
        let g = stochastic_exponential(&ens, &Curve::Constant(0.0), &Curve::Constant(-0.25), &[]).unwrap();
        let est = Estimate::from_samples(g.terminal());
        assert!(est.within(1.0, 3.0), "{est:?}");
    }

    #[test]
    fn jump_density_is_a_martingale() {
        let ens = simulate(&jump_model(1.5), 100_000, 21).unwrap();
        let sc = Scenario { theta0: Curve::Constant(0.0), theta1: vec![Curve::Constant(0.5)] };
        let m = girsanov_density(&ens, &sc).unwrap();
        let est = Estimate::from_samples(m.terminal());
        assert!(est.within(1.0, 3.0), "{est:?}");
        // closed form: E[M log M] = lambda T ((1+t) ln(1+t) - t)
        let h = relative_entropy(m.terminal()).unwrap();
        let exact = 1.5 * (1.5 * 1.5f64.ln() - 0.5);
        assert!(h.within(exact, 3.0), "{h:?} vs {exact}");
    }

    #[test]
    fn entropy_of_diffusion_scenarios() {
        let ens = simulate(&MarketModel::black_scholes(0.05, 0.2, 1.0, 20), 100_000, 4).unwrap();
        for (theta, exact) in [(0.5, 0.125), (-0.25, 0.03125)] {
            let m = girsanov_density(&ens, &Scenario::diffusion(theta, 0)).unwrap();
            let h = relative_entropy(m.terminal()).unwrap();
            assert!(h.within(exact, 3.0), "theta={theta}: {h:?}");
        }
        let m = girsanov_density(&ens, &Scenario::identity(0)).unwrap();
        assert_eq!(relative_entropy(m.terminal()).unwrap().mean, 0.0);
        assert!(relative_entropy(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_path_step() {
        let ens = simulate(&jump_model(1.0), 3, 1).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 100);
        assert!(text.starts_with("path,t,dB,count_0\n"));
    }
}
