use super::scheme::{martingale_parts, NoiseState};
use super::{BsdeSolution, Claim, LinearDriverParams, Method, SolveOptions};
use crate::error::{Error, Result};
use crate::market::{stochastic_exponential, PathEnsemble};
use crate::numerics::Estimate;

/// Linear BSDE via its explicit solution
/// `Y_t = E[Gamma_T/Gamma_t F + int_t^T Gamma_s/Gamma_t phi(s) ds | F_t]`,
/// with `Gamma` the stochastic exponential of `(alpha, beta, gamma)`.
///
/// `Y(0)` is a plain Monte Carlo mean; interior conditional expectations
/// use the regression basis of `opts`.
pub fn solve_linear(params: &LinearDriverParams, claim: &Claim, paths: &PathEnsemble, opts: &SolveOptions) -> Result<BsdeSolution> {
    params.validate(paths.grid(), paths.n_atoms())?;
    if opts.stop_step.is_some() {
        return Err(Error::InvalidArgument("the closed-form solver does not take a stopping step".into()));
    }
    let gamma = stochastic_exponential(paths, &params.alpha, &params.beta, &params.gamma_coef)?;
    let terminal = claim.evaluate(paths)?;
    let n = paths.n_steps();
    let np = paths.n_paths();
    let na = paths.n_atoms();
    let dt = paths.dt();

    // acc_n = Gamma_N F + sum_{i >= n} Gamma_i phi(t_i) dt
    let mut acc: Vec<f64> = terminal.iter().zip(gamma.terminal()).map(|(f, g)| f * g).collect();
    let store = opts.store_paths;
    let mut y_all = if store { vec![0.0; (n + 1) * np] } else { Vec::new() };
    let mut z_all = if store { vec![0.0; n * np] } else { Vec::new() };
    let mut k_all = if store { vec![0.0; n * np * na] } else { Vec::new() };
    if store {
        y_all[n * np..].copy_from_slice(&terminal);
    }
    let mut state = NoiseState::at(paths, n);
    let mut y_next = terminal;
    for step in (0..n).rev() {
        let t = paths.grid()[step];
        let phi = params.phi.at(t);
        for (a, g) in acc.iter_mut().zip(gamma.step(step)) {
            *a += g * phi * dt;
        }
        state.retreat(paths, step);
        let proj = state.projector(opts.basis_degree, step)?;
        let target: Vec<f64> = acc.iter().zip(gamma.step(step)).map(|(a, g)| a / g).collect();
        let y = match &proj {
            Some(pr) => pr.project(&target),
            None => target,
        };
        if store {
            let (_, z, k) = martingale_parts(proj.as_ref(), &y_next, paths, step);
            y_all[step * np..(step + 1) * np].copy_from_slice(&y);
            z_all[step * np..(step + 1) * np].copy_from_slice(&z);
            k_all[step * np * na..(step + 1) * np * na].copy_from_slice(&k);
        }
        y_next = y;
    }
    let est = Estimate::from_samples(&acc);
    Ok(BsdeSolution {
        method: Method::ClosedForm,
        y0: est.mean,
        y0_std_error: est.std_error,
        degenerate: np == 1,
        fixed_point_residual: 0.0,
        grid: paths.grid().to_vec(),
        n_paths: np,
        n_atoms: na,
        y: y_all,
        z: z_all,
        k: k_all,
        y0_samples: acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::Curve;
    use crate::market::{simulate, Atom, MarketModel};

    #[test]
    fn constant_claim_zero_driver() {
        let m = MarketModel::black_scholes(0.0, 0.2, 1.0, 10).with_atom(Atom::new(1.0, 0.5, 0.0));
        let ens = simulate(&m, 1000, 3).unwrap();
        let p = LinearDriverParams { gamma_coef: vec![Curve::Constant(0.0)], ..Default::default() };
        let sol = solve_linear(&p, &Claim::constant(1.7), &ens, &SolveOptions::default()).unwrap();
        assert!((sol.y0 - 1.7).abs() < 1e-13);
        assert!(sol.y0_std_error < 1e-14);
        for s in 0..10 {
            assert!(sol.y_step(s).iter().all(|v| (v - 1.7).abs() < 1e-12));
            let zbar = sol.z_step(s).iter().sum::<f64>() / 1000.0;
            assert!(zbar.abs() < 1.0, "{zbar}");
        }
    }

    #[test]
    fn running_payoff_integrates_to_the_horizon() {
        let ens = simulate(&MarketModel::black_scholes(0.0, 0.2, 1.0, 10), 200, 3).unwrap();
        let p = LinearDriverParams { phi: Curve::Constant(1.0), ..Default::default() };
        let sol = solve_linear(&p, &Claim::constant(0.0), &ens, &SolveOptions::default()).unwrap();
        assert!((sol.y0 - 1.0).abs() < 1e-13);
        assert!((sol.y(17, 4) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn replication_discounts_a_sure_payoff() {
        let m = MarketModel::black_scholes(0.07, 0.2, 1.0, 50).with_rate(0.05);
        let ens = simulate(&m, 20_000, 6).unwrap();
        let p = LinearDriverParams::replication(0.05, 0.07, 0.2);
        let sol = solve_linear(&p, &Claim::constant(1.0), &ens, &SolveOptions { store_paths: false, ..Default::default() }).unwrap();
        let exact = (-0.05f64).exp();
        assert!((sol.y0 - exact).abs() < 3.0 * sol.y0_std_error + 1e-12, "{} +- {}", sol.y0, sol.y0_std_error);
    }
}
