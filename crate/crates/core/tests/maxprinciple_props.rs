use levy_risk::bsde::SolveOptions;
use levy_risk::maxprinciple::{adjoint, risk_minimize_quadratic, utility_optimize, Control, ControlProblem, Utility};
use levy_risk::{simulate, MarketModel};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adjoint_boundary_rows_hold_pathwise(seed in 0u64..1000, mu in -0.1..0.2f64, sigma in 0.1..0.4f64, pi in -1.0..2.0f64) {
        let m = MarketModel::black_scholes(mu, sigma, 1.0, 10);
        let ens = simulate(&m, 2_000, seed).unwrap();
        let quad = ControlProblem::quadratic_risk(&m, 1.0);
        let adj = adjoint(&quad, &Control::constant(pi), &ens, &SolveOptions::default()).unwrap();
        for p in 0..2_000 {
            let lt = adj.lambda_at(p, 10);
            prop_assert!((adj.lambda_at(p, 0) - 1.0).abs() < 1e-9);
            prop_assert!((adj.p_at(p, 10) - lt).abs() <= 1e-9 * lt.abs().max(1.0));
        }
        let log = ControlProblem::log_utility(&m, 1.0);
        let adj = adjoint(&log, &Control::constant(pi), &ens, &SolveOptions::default()).unwrap();
        for p in 0..2_000 {
            let x = adj.trajectory.x_at(p, 10);
            prop_assert!((adj.p_at(p, 10) - 1.0 / x).abs() <= 1e-6 / x);
        }
    }

    #[test]
    fn log_utility_budget_is_exact(seed in 0u64..1000, mu in -0.1..0.2f64, sigma in 0.1..0.4f64, x0 in 0.1..10.0f64) {
        let m = MarketModel::black_scholes(mu, sigma, 1.0, 10);
        let ens = simulate(&m, 1_000, seed).unwrap();
        let res = utility_optimize(Utility::Log, &m, x0, &ens).unwrap();
        prop_assert!((res.budget.mean - x0).abs() <= 1e-12 * x0);
        prop_assert!((res.c * x0 - 1.0).abs() < 1e-10);
    }
}

#[test]
fn power_utility_budget_within_three_standard_errors() {
    let m = MarketModel::black_scholes(0.05, 0.2, 1.0, 20);
    let ens = simulate(&m, 50_000, 17).unwrap();
    for delta in [-2.0, -0.5, 0.3, 0.7] {
        let res = utility_optimize(Utility::Power { delta }, &m, 1.0, &ens).unwrap();
        assert!(res.budget.within(1.0, 3.0), "delta {delta}: {:?}", res.budget);
        assert!((res.c - res.c_bisection).abs() <= 1e-10 * res.c.abs().max(1.0));
    }
}

#[test]
fn minimal_risk_monte_carlo_matches_analytic() {
    let m = MarketModel::black_scholes(0.08, 0.25, 1.0, 20);
    let ens = simulate(&m, 50_000, 23).unwrap();
    let res = risk_minimize_quadratic(&m, 2.0, &ens).unwrap();
    assert!(res.minimal_risk_mc.within(res.minimal_risk_analytic, 3.0), "{res:?}");
    assert!(res.entropy_mc.within(res.entropy_analytic, 3.0));
}
