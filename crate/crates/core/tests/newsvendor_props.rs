use levy_risk::newsvendor::{
    expected_sales, follower_response, h_and_f, h_inverse, margin_of_sales, order_quantity, sales_of_margin,
    NewsvendorSpec,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn h_inverse_round_trips(t in 0.0..1.0f64, a in 1e-6..(1.0 - 1e-6)) {
        let spec = NewsvendorSpec::default();
        let x = h_inverse(&spec, t, a);
        prop_assert!((h_and_f(&spec, t, x).0 - a).abs() < 1e-12);
    }

    #[test]
    fn expected_sales_bounds(t in 0.0..1.0f64, q in -10.0..40.0f64, dq in 0.0..5.0f64) {
        let spec = NewsvendorSpec::default();
        let s = expected_sales(&spec, t, q);
        prop_assert!(s <= q + 1e-12);
        prop_assert!(s <= 10.0 + 1e-12);
        prop_assert!(expected_sales(&spec, t, q + dq) >= s - 1e-12);
    }

    #[test]
    fn margin_and_sales_are_inverse(t in 0.0..1.0f64, w in 2.0..19.0f64, y in 0.01..30.0f64) {
        let spec = NewsvendorSpec::default();
        let target = sales_of_margin(&spec, t, w, y);
        let back = margin_of_sales(&spec, t, w, target).unwrap();
        // F is flat once the order quantity is far in the upper tail
        prop_assert!((sales_of_margin(&spec, t, w, back) - target).abs() < 1e-9);
        prop_assert!(order_quantity(&spec, t, w, y) > f64::NEG_INFINITY);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn follower_identities_at_constant_prices(w in 1.5..19.5f64) {
        let spec = NewsvendorSpec::default();
        let prices = vec![w; spec.n_steps + 1];
        let fr = follower_response(&spec, &prices).unwrap();
        prop_assert!(fr.foc_residual <= 1e-8, "foc {}", fr.foc_residual);
        prop_assert!(fr.sales_residual <= 1e-8, "sales {}", fr.sales_residual);
        prop_assert!(fr.integral_residual <= 1e-6, "integral {}", fr.integral_residual);
        prop_assert_eq!(*fr.y.last().unwrap(), 0.0);
        for (r, w) in fr.r.iter().zip(&fr.w) {
            prop_assert!(*r >= *w && *w > spec.salvage);
        }
    }
}
