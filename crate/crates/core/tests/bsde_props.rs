use levy_risk::bsde::{compare_trees, solve_linear, solve_regression, Claim, Driver, LinearDriverParams, SolveOptions, Tree};
use levy_risk::{simulate, Atom, Curve, MarketModel};
use proptest::prelude::*;

fn tree(depth: usize, lambda: Option<f64>) -> Tree {
    let dt = 0.5 / depth as f64;
    match lambda {
        Some(l) => Tree::binomial_with_jump(dt, depth, l).unwrap(),
        None => Tree::binomial(dt, depth).unwrap(),
    }
}

fn lipschitz_driver(a: f64, b: f64, c: f64, lambda: f64) -> Driver {
    Driver::new("kinked", move |i| {
        let jump: f64 = i.k.iter().map(|k| -c * lambda * k.abs() + 0.5 * c * lambda * k).sum();
        b * i.z - a * i.z.abs() + jump
    })
    .independent_of_y()
    .concave()
}

fn leaves(depth: usize, jump: bool) -> impl Strategy<Value = Vec<f64>> {
    let b: usize = if jump { 4 } else { 2 };
    prop::collection::vec(-1.0..1.0f64, b.pow(depth as u32))
}

fn instance() -> impl Strategy<Value = (usize, Option<f64>, Vec<f64>)> {
    (1usize..=5, prop::option::of(0.2..1.5f64)).prop_flat_map(|(d, l)| (Just(d), Just(l), leaves(d, l.is_some())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn translation_is_exact_on_trees(
        (depth, lambda, f) in instance(),
        a in 0.0..0.5f64, b in -0.5..0.5f64, c in 0.0..0.4f64, shift in -2.0..2.0f64,
    ) {
        let t = tree(depth, lambda);
        let g = lipschitz_driver(a, b, c, lambda.unwrap_or(0.0));
        let base = t.solve(&g, &f, depth).unwrap();
        let moved: Vec<f64> = f.iter().map(|v| v + shift).collect();
        let sol = t.solve(&g, &moved, depth).unwrap();
        for (l0, l1) in base.y.iter().zip(&sol.y) {
            for (u, v) in l0.iter().zip(l1) {
                prop_assert!((v - u - shift).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn comparison_holds_node_wise(
        (depth, lambda, f) in instance(),
        gap in prop::collection::vec(0.0..0.3f64, 1024),
        a in 0.0..0.5f64, b in -0.5..0.5f64, c in 0.0..0.4f64, d in 0.0..0.3f64,
    ) {
        let t = tree(depth, lambda);
        let lam = lambda.unwrap_or(0.0);
        let g2 = lipschitz_driver(a, b, c, lam);
        let g2c = g2.clone();
        let g1 = Driver::new("lower", move |i| g2c.eval(i) - d - 0.1 * i.z * i.z);
        let f1: Vec<f64> = f.iter().zip(gap.iter().cycle()).map(|(v, e)| v - e).collect();
        let s1 = t.solve(&g1, &f1, depth).unwrap();
        let s2 = t.solve(&g2, &f, depth).unwrap();
        let rep = compare_trees(&s1, &s2, 0.0).unwrap();
        prop_assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn y_only_driver_round_trip((depth, lambda, f) in instance(), a in -0.25..0.25f64, b in -1.0..1.0f64) {
        let t = tree(depth, lambda);
        let g = move |s: f64, y: f64| a * y.sin() + b * s;
        let driver = Driver::new("y only", move |i| g(i.t, i.y));
        let sol = t.solve(&driver, &f, depth).unwrap();
        // running integral of g along each leaf's ancestry, from every depth n
        let n_leaves = t.n_nodes(depth);
        for n in 0..depth {
            let total: Vec<f64> = (0..n_leaves)
                .map(|leaf| {
                    let run: f64 = (n..depth)
                        .map(|m| g(m as f64 * t.dt, sol.y[m][t.ancestor(leaf, depth, m)]) * t.dt)
                        .sum();
                    run + f[leaf]
                })
                .collect();
            let cond = t.conditional_expectation(&total, depth, n);
            for (u, v) in cond.iter().zip(&sol.y[n]) {
                prop_assert!((u - v).abs() < 1e-10, "depth {n}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn regression_terminal_is_the_claim(seed in 0u64..500, degree in 1u32..4, lambda in 0.0..2.0f64) {
        let m = MarketModel::black_scholes(0.05, 0.2, 1.0, 8).with_atom(Atom::new(1.0, lambda, 0.1));
        let paths = simulate(&m, 400, seed).unwrap();
        let claim = Claim::path("wn", |p| (p.terminal_brownian() + p.terminal_jumps(0)).tanh());
        let values = claim.evaluate(&paths).unwrap();
        let opts = SolveOptions { basis_degree: degree, ..Default::default() };
        let sol = solve_regression(&Driver::entropic(), &claim, &paths, &opts).unwrap();
        for (p, v) in values.iter().enumerate() {
            prop_assert_eq!(sol.y(p, 8).to_bits(), v.to_bits());
        }
        let params = LinearDriverParams { gamma_coef: vec![Curve::Constant(0.1)], ..LinearDriverParams::replication(0.0, 0.05, 0.2) };
        let lin = solve_linear(&params, &claim, &paths, &opts).unwrap();
        for (p, v) in values.iter().enumerate() {
            prop_assert_eq!(lin.y(p, 8).to_bits(), v.to_bits());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn regression_translation_within_monte_carlo_error(seed in 0u64..500, b in -0.5..0.5f64, shift in -1.0..1.0f64) {
        let m = MarketModel::black_scholes(0.05, 0.2, 1.0, 10);
        let paths = simulate(&m, 4_000, seed).unwrap();
        let claim = Claim::terminal("w^2", |w, _| w * w);
        let driver = Driver::new("linear in z", move |i| b * i.z).independent_of_y();
        let opts = SolveOptions { store_paths: false, ..Default::default() };
        let base = solve_regression(&driver, &claim, &paths, &opts).unwrap();
        let moved = solve_regression(&driver, &claim.shifted(shift), &paths, &opts).unwrap();
        let err = (moved.y0 - base.y0 - shift).abs();
        prop_assert!(err <= 3.0 * base.y0_std_error, "error {err} vs s.e. {}", base.y0_std_error);
    }
}

#[test]
fn time_varying_discount_uses_left_points() {
    let params = LinearDriverParams {
        alpha: Curve::sample(&[0.0, 0.5, 1.0], |t| -0.02 * t).unwrap(),
        ..Default::default()
    };
    let m = MarketModel::black_scholes(0.05, 0.2, 1.0, 4);
    let paths = simulate(&m, 50, 3).unwrap();
    let sol = solve_linear(&params, &Claim::constant(1.0), &paths, &SolveOptions::default()).unwrap();
    // alpha at 0, 1/4, 1/2, 3/4 times dt = 1/4
    let exact = (-0.0075f64).exp();
    assert!((sol.y0 - exact).abs() < 1e-14, "{}", sol.y0);
}
