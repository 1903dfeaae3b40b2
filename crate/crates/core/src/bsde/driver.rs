use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curve::Curve;
use crate::error::{Error, Result};

/// Arguments passed to a driver. `path` is a path index for Monte Carlo
/// solvers and a node index for the tree solver.
#[derive(Debug, Clone, Copy)]
pub struct DriverInput<'a> {
    pub t: f64,
    pub step: usize,
    pub path: usize,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
}

type DriverFn = dyn Fn(&DriverInput<'_>) -> f64 + Send + Sync;

/// A BSDE driver `g(t, y, z, k)` with its declared regularity.
#[derive(Clone)]
pub struct Driver {
    f: Arc<DriverFn>,
    pub label: String,
    /// Declared Lipschitz constant in `(y, z, k)`; infinite when undeclared.
    pub lipschitz: f64,
    /// Per-atom interval `[lo, hi]` with `lo > -1` bounding the jump-domination process.
    pub theta_bounds: Vec<(f64, f64)>,
    pub depends_on_y: bool,
    pub concave: bool,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("label", &self.label)
            .field("lipschitz", &self.lipschitz)
            .field("theta_bounds", &self.theta_bounds)
            .field("depends_on_y", &self.depends_on_y)
            .field("concave", &self.concave)
            .finish()
    }
}

impl Driver {
    pub fn new<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&DriverInput<'_>) -> f64 + Send + Sync + 'static,
    {
        Driver {
            f: Arc::new(f),
            label: label.into(),
            lipschitz: f64::INFINITY,
            theta_bounds: Vec::new(),
            depends_on_y: true,
            concave: false,
        }
    }

    pub fn with_lipschitz(mut self, c: f64) -> Self {
        self.lipschitz = c;
        self
    }

    pub fn with_theta_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.theta_bounds = bounds;
        self
    }

    pub fn independent_of_y(mut self) -> Self {
        self.depends_on_y = false;
        self
    }

    pub fn concave(mut self) -> Self {
        self.concave = true;
        self
    }

    #[inline]
    pub fn eval(&self, input: &DriverInput<'_>) -> f64 {
        (self.f)(input)
    }

    /// Convenience evaluation outside a solver.
    pub fn at(&self, t: f64, y: f64, z: f64, k: &[f64]) -> f64 {
        self.eval(&DriverInput { t, step: 0, path: 0, y, z, k })
    }

    pub fn zero() -> Self {
        Driver::new("zero", |_| 0.0).with_lipschitz(0.0).independent_of_y().concave()
    }

    /// `g = -z^2 / 2`, the entropic driver.
    pub fn entropic() -> Self {
        Driver::new("entropic", |i| -0.5 * i.z * i.z).independent_of_y().concave()
    }

    /// `g = phi + alpha y + beta z + sum_j lambda_j gamma_j k_j`.
    pub fn linear(params: &LinearDriverParams, lambdas: &[f64], grid: &[f64]) -> Result<Self> {
        params.validate(grid, lambdas.len())?;
        let p = params.clone();
        let lam = lambdas.to_vec();
        let mut c: f64 = 0.0;
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); lam.len()];
        for &t in grid {
            let jump: f64 = p.gamma_coef.iter().zip(&lam).map(|(g, l)| (l * g.at(t)).powi(2)).sum::<f64>().sqrt();
            c = c.max(p.alpha.at(t).abs() + p.beta.at(t).abs() + jump);
            for (b, g) in bounds.iter_mut().zip(&p.gamma_coef) {
                b.0 = b.0.min(g.at(t));
                b.1 = b.1.max(g.at(t));
            }
        }
        let depends_on_y = !p.alpha.is_zero();
        let mut d = Driver::new("linear", move |i| {
            let mut g = p.phi.at(i.t) + p.alpha.at(i.t) * i.y + p.beta.at(i.t) * i.z;
            for ((gc, l), k) in p.gamma_coef.iter().zip(&lam).zip(i.k) {
                g += l * gc.at(i.t) * k;
            }
            g
        })
        .with_lipschitz(c)
        .with_theta_bounds(bounds)
        .concave();
        d.depends_on_y = depends_on_y;
        Ok(d)
    }

    /// Checks that `g(t, 0, 0, 0)` is finite on the grid.
    pub fn check_finite_at_zero(&self, grid: &[f64], n_atoms: usize) -> Result<()> {
        let k = vec![0.0; n_atoms];
        for (step, &t) in grid.iter().enumerate() {
            let v = self.eval(&DriverInput { t, step, path: 0, y: 0.0, z: 0.0, k: &k });
            if !v.is_finite() {
                return Err(Error::NonFinite { what: format!("driver {} at zero", self.label), step });
            }
        }
        Ok(())
    }

    /// Spot-checks the declared Lipschitz constant on random probe pairs in
    /// `[-radius, radius]`. Returns the largest observed difference quotient.
    pub fn check_lipschitz(&self, grid: &[f64], n_atoms: usize, probes: usize, radius: f64, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut k1 = vec![0.0; n_atoms];
        let mut k2 = vec![0.0; n_atoms];
        for _ in 0..probes {
            let step = rng.random_range(0..grid.len());
            let t = grid[step];
            let mut u = || rng.random_range(-radius..=radius);
            let (y1, y2, z1, z2) = (u(), u(), u(), u());
            for j in 0..n_atoms {
                k1[j] = u();
                k2[j] = u();
            }
            let g1 = self.eval(&DriverInput { t, step, path: 0, y: y1, z: z1, k: &k1 });
            let g2 = self.eval(&DriverInput { t, step, path: 0, y: y2, z: z2, k: &k2 });
            let dk: f64 = k1.iter().zip(&k2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dist = (y1 - y2).abs() + (z1 - z2).abs() + dk;
            if dist > 0.0 {
                worst = worst.max((g1 - g2).abs() / dist);
            }
        }
        if worst > self.lipschitz * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "driver {} violates its Lipschitz bound {}: observed {worst}",
                self.label, self.lipschitz
            )));
        }
        Ok(worst)
    }

    /// Spot-checks `g(k1) - g(k2) >= sum_j lambda_j theta_j (k1_j - k2_j)` for
    /// some `theta_j` in the declared bounds, which is the domination condition
    /// behind the comparison theorem.
    pub fn check_jump_domination(&self, grid: &[f64], lambdas: &[f64], probes: usize, radius: f64, seed: u64) -> Result<()> {
        if self.theta_bounds.len() != lambdas.len() {
            return Err(Error::GridMismatch(format!(
                "driver {} declares {} theta bounds for {} atoms",
                self.label,
                self.theta_bounds.len(),
                lambdas.len()
            )));
        }
        if let Some((j, b)) = self.theta_bounds.iter().enumerate().find(|(_, b)| !(b.0 > -1.0 && b.0 <= b.1)) {
            return Err(Error::InvalidArgument(format!("theta bound {j} = {b:?} must satisfy -1 < lo <= hi")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = lambdas.len();
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        for _ in 0..probes {
            let step = rng.random_range(0..grid.len());
            let t = grid[step];
            let y = rng.random_range(-radius..=radius);
            let z = rng.random_range(-radius..=radius);
            for j in 0..n {
                k1[j] = rng.random_range(-radius..=radius);
                k2[j] = rng.random_range(-radius..=radius);
            }
            let g1 = self.eval(&DriverInput { t, step, path: 0, y, z, k: &k1 });
            let g2 = self.eval(&DriverInput { t, step, path: 0, y, z, k: &k2 });
            let lower: f64 = (0..n)
                .map(|j| {
                    let d = k1[j] - k2[j];
                    lambdas[j] * (self.theta_bounds[j].0 * d).min(self.theta_bounds[j].1 * d)
                })
                .sum();
            if g1 - g2 < lower - 1e-10 * (1.0 + g1.abs()) {
                return Err(Error::InvalidArgument(format!(
                    "driver {} fails jump domination at t={t}: g(k1)-g(k2)={} < {lower}",
                    self.label,
                    g1 - g2
                )));
            }
        }
        Ok(())
    }
}

/// Coefficients of the linear driver `phi + alpha y + beta z + sum lambda_j gamma_j k_j`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearDriverParams {
    pub phi: Curve,
    pub alpha: Curve,
    pub beta: Curve,
    #[serde(default)]
    pub gamma_coef: Vec<Curve>,
}

impl LinearDriverParams {
    pub fn validate(&self, grid: &[f64], n_atoms: usize) -> Result<()> {
        if self.gamma_coef.len() != n_atoms {
            return Err(Error::GridMismatch(format!(
                "{} jump coefficients for {n_atoms} atoms",
                self.gamma_coef.len()
            )));
        }
        for c in [&self.phi, &self.alpha, &self.beta].into_iter().chain(&self.gamma_coef) {
            if !c.all_finite() {
                return Err(Error::InvalidArgument("linear driver has non-finite coefficients".into()));
            }
        }
        for (j, g) in self.gamma_coef.iter().enumerate() {
            for &t in grid {
                if !(g.at(t) > -1.0) {
                    return Err(Error::JumpCoefficient { atom: j, t, value: g.at(t) });
                }
            }
        }
        Ok(())
    }

    /// The replication driver `-r y - ((mu - r)/sigma) z` of a Black-Scholes hedger.
    pub fn replication(r: f64, mu: f64, sigma: f64) -> Self {
        LinearDriverParams {
            phi: Curve::Constant(0.0),
            alpha: Curve::Constant(-r),
            beta: Curve::Constant(-(mu - r) / sigma),
            gamma_coef: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<f64> {
        (0..=10).map(|i| i as f64 * 0.1).collect()
    }

    #[test]
    fn linear_driver_declares_its_constant() {
        let p = LinearDriverParams {
            phi: Curve::Constant(1.0),
            alpha: Curve::Constant(-0.05),
            beta: Curve::Constant(0.3),
            gamma_coef: vec![Curve::Constant(0.2)],
        };
        let d = Driver::linear(&p, &[2.0], &grid()).unwrap();
        assert!((d.lipschitz - (0.05 + 0.3 + 0.4)).abs() < 1e-15);
        assert!(d.depends_on_y);
        assert_eq!(d.at(0.0, 1.0, 1.0, &[1.0]), 1.0 - 0.05 + 0.3 + 0.4);
        d.check_finite_at_zero(&grid(), 1).unwrap();
        let obs = d.check_lipschitz(&grid(), 1, 500, 3.0, 1).unwrap();
        assert!(obs <= d.lipschitz);
        d.check_jump_domination(&grid(), &[2.0], 500, 3.0, 2).unwrap();
    }

    #[test]
    fn lipschitz_probe_catches_understatement() {
        let d = Driver::new("steep", |i| 5.0 * i.z).with_lipschitz(1.0);
        assert!(d.check_lipschitz(&grid(), 0, 100, 1.0, 3).is_err());
    }

    #[test]
    fn domination_probe_catches_decreasing_jump_response() {
        // theta = -2 < -1 would be needed
        let d = Driver::new("bad", |i| -2.0 * i.k[0]).with_theta_bounds(vec![(-0.5, 0.5)]);
        assert!(d.check_jump_domination(&grid(), &[1.0], 100, 1.0, 4).is_err());
    }

    #[test]
    fn rejects_jump_coefficient_at_minus_one() {
        let p = LinearDriverParams { gamma_coef: vec![Curve::Constant(-1.0)], ..Default::default() };
        assert!(matches!(Driver::linear(&p, &[1.0], &grid()), Err(Error::JumpCoefficient { .. })));
    }
}
