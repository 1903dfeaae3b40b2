use super::{BsdeSolution, Claim, Driver, DriverInput, Method, SolveOptions};
use crate::error::{Error, Result};
use crate::market::PathEnsemble;
use crate::numerics::Estimate;
use crate::regression::{basis_size, Projector, StateVar};

const MAX_FIXED_POINT: usize = 20;
const FIXED_POINT_TOL: f64 = 1e-12;

/// Markov state `(W, N_1, ..., N_J)` across paths, walked backward in time.
pub(crate) struct NoiseState {
    pub w: Vec<f64>,
    pub counts: Vec<Vec<f64>>,
}

impl NoiseState {
    pub fn at(paths: &PathEnsemble, step: usize) -> Self {
        let np = paths.n_paths();
        let na = paths.n_atoms();
        let flat = paths.counts_at(step);
        let counts = (0..na).map(|j| (0..np).map(|p| flat[p * na + j]).collect()).collect();
        NoiseState { w: paths.brownian_at(step), counts }
    }

    /// Moves the state from `step + 1` back to `step`.
    pub fn retreat(&mut self, paths: &PathEnsemble, step: usize) {
        for (w, d) in self.w.iter_mut().zip(paths.db_step(step)) {
            *w -= d;
        }
        for (j, c) in self.counts.iter_mut().enumerate() {
            for (p, v) in c.iter_mut().enumerate() {
                *v -= paths.count(p, step, j) as f64;
            }
        }
        // W is rebuilt by subtraction; snap round-off at the origin
        if step == 0 {
            self.w.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    /// Regression operator for this step, or `None` for a one-path ensemble.
    pub fn projector(&self, degree: u32, step: usize) -> Result<Option<Projector>> {
        let np = self.w.len();
        if np == 1 {
            return Ok(None);
        }
        let mut vars = vec![StateVar { values: &self.w, discrete: false }];
        vars.extend(self.counts.iter().map(|c| StateVar { values: c, discrete: true }));
        let p = basis_size(&vars, degree);
        if np < 10 * p {
            return Err(Error::TooFewPaths { paths: np, basis: p });
        }
        Projector::fit(&vars, degree, step).map(Some)
    }
}

/// Conditional expectation of `Y_{n+1}` and the martingale-increment
/// estimators of `Z_n` and `K_n` (flat `[path][atom]`).
pub(crate) fn martingale_parts(
    proj: Option<&Projector>,
    y_next: &[f64],
    paths: &PathEnsemble,
    step: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();
    let Some(proj) = proj else {
        return (y_next.to_vec(), vec![0.0; np], vec![0.0; np * na]);
    };
    let ey = proj.project(y_next);
    let dbs = paths.db_step(step);
    let zt: Vec<f64> = y_next.iter().zip(dbs).map(|(y, d)| y * d).collect();
    let z: Vec<f64> = proj.project(&zt).into_iter().map(|v| v / dt).collect();
    let mut k = vec![0.0; np * na];
    for (j, &lam) in paths.lambdas().iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        let kt: Vec<f64> = (0..np).map(|p| y_next[p] * paths.dn_tilde(p, step, j)).collect();
        for (p, v) in proj.project(&kt).into_iter().enumerate() {
            k[p * na + j] = v / (lam * dt);
        }
    }
    (ey, z, k)
}

/// Solves `Y_n = E_n[Y_{n+1}] + g(t_n, Y_n, Z_n, K_n) dt` for `Y_n` by fixed-point
/// iteration. Returns `(Y_n, g, residual)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn implicit_step(
    driver: &Driver,
    t: f64,
    step: usize,
    path: usize,
    ey: f64,
    z: f64,
    k: &[f64],
    dt: f64,
) -> Result<(f64, f64, f64)> {
    let eval = |y: f64| -> Result<f64> {
        let g = driver.eval(&DriverInput { t, step, path, y, z, k });
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Error::NonFinite { what: format!("driver {} on path {path}", driver.label), step })
        }
    };
    let mut y = ey;
    let mut g = eval(y)?;
    if !driver.depends_on_y {
        return Ok((ey + g * dt, g, 0.0));
    }
    let mut resid = f64::INFINITY;
    for _ in 0..MAX_FIXED_POINT {
        let next = ey + g * dt;
        resid = (next - y).abs();
        y = next;
        g = eval(y)?;
        if resid <= FIXED_POINT_TOL * (1.0 + y.abs()) {
            break;
        }
    }
    Ok((y, g, resid))
}

/// Backward regression Monte Carlo for a general driver.
pub fn solve_regression(driver: &Driver, claim: &Claim, paths: &PathEnsemble, opts: &SolveOptions) -> Result<BsdeSolution> {
    let n = paths.n_steps();
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();
    let tau = opts.stop_step.unwrap_or(n);
    if tau > n {
        return Err(Error::GridMismatch(format!("stopping step {tau} beyond the last step {n}")));
    }
    let terminal = claim.evaluate(paths)?;
    let store = opts.store_paths;
    let mut y_all = if store { vec![0.0; (n + 1) * np] } else { Vec::new() };
    let mut z_all = if store { vec![0.0; n * np] } else { Vec::new() };
    let mut k_all = if store { vec![0.0; n * np * na] } else { Vec::new() };
    if store {
        for s in tau..=n {
            y_all[s * np..(s + 1) * np].copy_from_slice(&terminal);
        }
    }

    let mut state = NoiseState::at(paths, tau);
    let mut y_next = terminal.clone();
    let mut pathwise = terminal.clone();
    let mut fp_resid: f64 = 0.0;
    for step in (0..tau).rev() {
        state.retreat(paths, step);
        let proj = state.projector(opts.basis_degree, step)?;
        let (ey, z, k) = martingale_parts(proj.as_ref(), &y_next, paths, step);
        let t = paths.grid()[step];
        let dbs = paths.db_step(step);
        let mut y = vec![0.0; np];
        for p in 0..np {
            let kp = &k[p * na..(p + 1) * na];
            let (yp, g, r) = implicit_step(driver, t, step, p, ey[p], z[p], kp, dt)?;
            fp_resid = fp_resid.max(r);
            y[p] = yp;
            let mut mart = z[p] * dbs[p];
            for j in 0..na {
                mart += kp[j] * paths.dn_tilde(p, step, j);
            }
            pathwise[p] += g * dt - mart;
        }
        if store {
            y_all[step * np..(step + 1) * np].copy_from_slice(&y);
            z_all[step * np..(step + 1) * np].copy_from_slice(&z);
            k_all[step * np * na..(step + 1) * np * na].copy_from_slice(&k);
        }
        y_next = y;
    }
    let y0 = y_next.iter().sum::<f64>() / np as f64;
    let est = Estimate::from_samples(&pathwise);
    Ok(BsdeSolution {
        method: Method::Regression,
        y0,
        y0_std_error: est.std_error,
        degenerate: np == 1,
        fixed_point_residual: fp_resid,
        grid: paths.grid().to_vec(),
        n_paths: np,
        n_atoms: na,
        y: y_all,
        z: z_all,
        k: k_all,
        y0_samples: pathwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::LinearDriverParams;
    use crate::market::{simulate, Atom, MarketModel};

    #[test]
    fn zero_driver_constant_claim() {
        let m = MarketModel::black_scholes(0.0, 0.2, 1.0, 20).with_atom(Atom::new(1.0, 1.0, 0.1));
        let ens = simulate(&m, 2000, 1).unwrap();
        let sol = solve_regression(&Driver::zero(), &Claim::constant(2.5), &ens, &SolveOptions::default()).unwrap();
        assert!((sol.y0 - 2.5).abs() < 1e-12);
        for s in 0..20 {
            for p in 0..2000 {
                assert!((sol.y(p, s) - 2.5).abs() < 1e-12);
            }
            // Z and K carry only regression noise of order sqrt(basis / paths / dt)
            let rms_z = (sol.z_step(s).iter().map(|z| z * z).sum::<f64>() / 2000.0).sqrt();
            assert!(rms_z < 1.5, "step {s}: {rms_z}");
        }
        assert_eq!(sol.y_step(20), &vec![2.5; 2000][..]);
    }

    #[test]
    fn terminal_values_are_the_claim() {
        let m = MarketModel::black_scholes(0.0, 0.2, 1.0, 10);
        let ens = simulate(&m, 500, 2).unwrap();
        let claim = Claim::terminal("w^2", |w, _| w * w);
        let f = claim.evaluate(&ens).unwrap();
        let sol = solve_regression(&Driver::entropic(), &claim, &ens, &SolveOptions::default()).unwrap();
        assert_eq!(sol.y_step(10), &f[..]);
    }

    #[test]
    fn brownian_square_has_known_z() {
        // F = W_T^2 with g = 0: Y_t = W_t^2 + T - t, Z_t = 2 W_t
        let m = MarketModel::black_scholes(0.0, 0.2, 1.0, 20);
        let ens = simulate(&m, 20_000, 9).unwrap();
        let sol = solve_regression(&Driver::zero(), &Claim::terminal("w^2", |w, _| w * w), &ens, &SolveOptions::default()).unwrap();
        assert!((sol.y0 - 1.0).abs() < 4.0 * sol.y0_std_error + 1e-3, "{}", sol.y0);
        let w = ens.brownian_at(10);
        let mut err = 0.0;
        for p in 0..20_000 {
            err += (sol.z(p, 10) - 2.0 * w[p]).abs();
        }
        assert!(err / 20_000.0 < 0.05);
    }

    #[test]
    fn too_few_paths_is_reported() {
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 5), 15, 1).unwrap();
        let r = solve_regression(&Driver::zero(), &Claim::terminal("w", |w, _| w), &ens, &SolveOptions::default());
        assert!(matches!(r, Err(Error::TooFewPaths { paths: 15, basis: 4 })));
    }

    #[test]
    fn single_path_uses_the_pathwise_identity() {
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 5), 1, 1).unwrap();
        let d = Driver::new("one", |_| 1.0).independent_of_y();
        let sol = solve_regression(&d, &Claim::constant(0.0), &ens, &SolveOptions::default()).unwrap();
        assert!(sol.degenerate);
        assert!((sol.y0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_driver_is_an_error() {
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 5), 100, 1).unwrap();
        let d = Driver::new("nan", |_| f64::NAN);
        let r = solve_regression(&d, &Claim::constant(0.0), &ens, &SolveOptions::default());
        assert!(matches!(r, Err(Error::NonFinite { step: 4, .. })));
    }

    #[test]
    fn stopping_step_freezes_the_solution() {
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 10), 1000, 4).unwrap();
        let d = Driver::new("one", |_| 1.0).independent_of_y();
        let opts = SolveOptions { stop_step: Some(5), ..Default::default() };
        let sol = solve_regression(&d, &Claim::constant(0.0), &ens, &opts).unwrap();
        assert!((sol.y0 - 0.5).abs() < 1e-12);
        assert!(sol.y_step(7).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn implicit_step_matches_the_exact_discount() {
        // g = -r y, F = 1: Y_n = (1 + r dt)^{-(N - n)}
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 10), 100, 4).unwrap();
        let p = LinearDriverParams::replication(0.05, 0.05, 0.2);
        let d = Driver::linear(&p, &[], ens.grid()).unwrap();
        let sol = solve_regression(&d, &Claim::constant(1.0), &ens, &SolveOptions::default()).unwrap();
        assert!((sol.y0 - 1.005f64.powi(-10)).abs() < 1e-12);
    }
}
