use levy_risk::hjbi::{
    generator_apply, solve_first_order, terminal_reward, value_closed, Ansatz, CandidateValue, FirstOrderSystem,
    GameControls, GamePoint, GameSpec,
};
use levy_risk::maxprinciple::risk_minimize_quadratic;
use levy_risk::{simulate, Atom, MarketModel};
use proptest::prelude::*;

fn jump_spec(mu: f64, sigma: f64, lambda: f64, gamma: f64) -> GameSpec {
    GameSpec::new(MarketModel::black_scholes(mu, sigma, 1.0, 20).with_atom(Atom::new(1.0, lambda, gamma))).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn first_order_solution_is_admissible(
        mu in -0.2..0.2f64, sigma in 0.1..0.5f64, lambda in 0.1..2.0f64, gamma in -0.3..0.3f64, s in 0.0..1.0f64,
    ) {
        let spec = jump_spec(mu, sigma, lambda, gamma);
        let sol = solve_first_order(&spec, s, FirstOrderSystem::Stationarity).unwrap();
        prop_assert!(sol.residual <= 1e-10);
        prop_assert!(sol.controls.theta1[0] > -1.0);
        prop_assert!(close(sol.controls.theta0, -sol.controls.w * sigma, 1e-12));
    }

    #[test]
    fn generator_is_linear_in_m(
        mu in -0.2..0.2f64, sigma in 0.1..0.5f64, lambda in 0.1..2.0f64, gamma in -0.3..0.3f64,
        s in 0.0..1.0f64, x in 0.25..4.0f64, m in 0.25..4.0f64,
        theta0 in -2.0..2.0f64, theta1 in -0.9..3.0f64, w in -2.0..2.0f64,
    ) {
        let spec = jump_spec(mu, sigma, lambda, gamma);
        let phi = Ansatz::from_saddle(&spec, FirstOrderSystem::Stationarity).unwrap();
        let c = GameControls { theta0, theta1: vec![theta1], w };
        let a1 = generator_apply(&spec, &phi, &GamePoint::new(s, x, m), &c).unwrap();
        let a2 = generator_apply(&spec, &phi, &GamePoint::new(s, x, 2.0 * m), &c).unwrap();
        prop_assert!(close(a2, 2.0 * a1, 1e-12), "{a2} vs 2 * {a1}");
    }

    #[test]
    fn saddle_point_against_random_deviations(
        mu in -0.2..0.2f64, sigma in 0.1..0.5f64, lambda in 0.1..2.0f64, gamma in -0.3..0.3f64,
        s in 0.0..1.0f64, x in 0.25..4.0f64, m in 0.25..4.0f64,
        theta0 in -2.0..2.0f64, theta1 in -0.9..3.0f64, w in -2.0..2.0f64,
    ) {
        let spec = jump_spec(mu, sigma, lambda, gamma);
        let phi = Ansatz::from_saddle(&spec, FirstOrderSystem::Stationarity).unwrap();
        let pt = GamePoint::new(s, x, m);
        let hat = solve_first_order(&spec, s, FirstOrderSystem::Stationarity).unwrap().controls;
        let a_hat = generator_apply(&spec, &phi, &pt, &hat).unwrap();
        let a_theta = generator_apply(&spec, &phi, &pt, &GameControls { theta0, theta1: vec![theta1], w: hat.w }).unwrap();
        let a_w = generator_apply(&spec, &phi, &pt, &GameControls { w, ..hat.clone() }).unwrap();
        prop_assert!(a_hat.abs() <= 1e-9 * m);
        prop_assert!(a_theta <= a_hat + 1e-9 * m);
        prop_assert!(a_w >= a_hat - 1e-9 * m);
    }

    #[test]
    fn candidate_meets_the_terminal_reward(
        mu in -0.2..0.2f64, sigma in 0.1..0.5f64, lambda in 0.1..2.0f64, gamma in -0.3..0.3f64,
        x in 0.25..4.0f64, m in 0.25..4.0f64,
    ) {
        let spec = jump_spec(mu, sigma, lambda, gamma);
        let phi = Ansatz::from_saddle(&spec, FirstOrderSystem::Stationarity).unwrap();
        prop_assert!(phi.kappa(1.0).abs() < 1e-15);
        prop_assert!(close(phi.value(1.0, x, m), terminal_reward(x, m), 1e-14));
    }

    #[test]
    fn closed_value_matches_quadratic_risk(mu in -0.2..0.2f64, sigma in 0.1..0.5f64, x in 0.1..5.0f64) {
        let market = MarketModel::black_scholes(mu, sigma, 1.0, 10);
        let spec = GameSpec::new(market.clone()).unwrap();
        let paths = simulate(&market, 2, 1).unwrap();
        let rm = risk_minimize_quadratic(&market, x, &paths).unwrap();
        let v = value_closed(&spec, &GamePoint::new(0.0, x, 1.0)).unwrap();
        prop_assert!((v - rm.minimal_risk_analytic).abs() <= 1e-10 * v.abs().max(1.0));
    }
}
