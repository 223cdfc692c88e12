//! Property tests over randomized slices and expressions.

use proptest::prelude::*;
use std::sync::Arc;

use qvi_core::expr::parse_expr;
use qvi_core::model::{const_ts, const_x, CoefficientSet, MarkSpace, ProblemSpec};
use qvi_core::operators::{apply_m, generator_apply, interpolate, penalty, Grid};

fn jump_spec() -> (Grid, ProblemSpec) {
    let grid = Grid::new(3.0, 25, 8, 1, 1.0).unwrap();
    let marks = MarkSpace::new(vec![vec![1.0], vec![-1.0]], vec![1.0, 1.0]).unwrap();
    let spec = ProblemSpec {
        horizon: 1.0,
        dim: 1,
        coefficients: CoefficientSet {
            drift: vec![Arc::new(|_t: f64, x: &[f64]| Ok(0.3 * (0.5 - x[0])))],
            sigma: vec![const_ts(0.3)],
            jump: vec![Arc::new(|_t: f64, x: &[f64], e: &[f64]| Ok(0.5 * (e[0] - x[0])))],
            cost: Arc::new(|_t: f64, x: &[f64], _e: &[f64]| Ok(0.2 + 0.05 * x[0] * x[0])),
            obstacle: const_ts(-1e6),
            terminal: const_x(0.0),
        },
        marks,
        k_gamma: 1.0,
        growth_rho: 2.0,
        lip_f: 0.2,
        lip_gamma: 0.5,
        lip_a_sigma: 0.3,
        loop_delta1: 0.2,
        loop_delta2: 0.1,
    };
    (grid, spec)
}

fn slice_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0..5.0f64, n)
}

proptest! {
    #[test]
    fn m_is_monotone(v in slice_strategy(25), bump in proptest::collection::vec(0.0..2.0f64, 25)) {
        let (grid, spec) = jump_spec();
        let v2: Vec<f64> = v.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let m1 = apply_m(&grid, &v, 0.3, &spec).unwrap();
        let m2 = apply_m(&grid, &v2, 0.3, &spec).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            prop_assert!(a <= &(b + 1e-12));
        }
    }

    #[test]
    fn m_commutes_with_constant_shifts(v in slice_strategy(25), c in -3.0..3.0f64) {
        let (grid, spec) = jump_spec();
        let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
        let m = apply_m(&grid, &v, 0.5, &spec).unwrap();
        let ms = apply_m(&grid, &shifted, 0.5, &spec).unwrap();
        for (a, b) in ms.iter().zip(&m) {
            prop_assert!((a - (b + c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn penalty_complementarity(v in slice_strategy(25), n in 0.5..32.0f64) {
        let (grid, spec) = jump_spec();
        let m = apply_m(&grid, &v, 0.2, &spec).unwrap();
        let p = penalty(&grid, &v, 0.2, n, &spec).unwrap();
        for i in 0..v.len() {
            if v[i] <= m[i] {
                prop_assert_eq!(p[i], 0.0);
            } else {
                prop_assert!(p[i] > 0.0);
            }
        }
    }

    #[test]
    fn penalty_scales_linearly(v in slice_strategy(25), n in 0.5..16.0f64, factor in 1.0..4.0f64) {
        let (grid, spec) = jump_spec();
        let p1 = penalty(&grid, &v, 0.2, n, &spec).unwrap();
        let p2 = penalty(&grid, &v, 0.2, factor * n, &spec).unwrap();
        for i in 0..v.len() {
            prop_assert!((p2[i] - factor * p1[i]).abs() <= 1e-11 * p1[i].abs().max(1.0));
        }
    }

    #[test]
    fn generator_annihilates_constants(c in -10.0..10.0f64) {
        let (grid, spec) = jump_spec();
        let v = vec![c; grid.num_nodes()];
        let l = generator_apply(&grid, &v, 0.4, &spec).unwrap();
        for x in &l {
            prop_assert!(x.abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn interpolation_is_exact_on_affine_data(a in -2.0..2.0f64, b in -2.0..2.0f64, x in -3.0..3.0f64) {
        let (grid, _) = jump_spec();
        let v: Vec<f64> = (0..grid.num_nodes()).map(|i| a * grid.coord(i) + b).collect();
        let got = interpolate(&grid, &v, &[x]);
        prop_assert!((got - (a * x + b)).abs() <= 1e-11 * (1.0 + (a * x + b).abs()));
    }

    #[test]
    fn expression_print_reparse_round_trip(
        c1 in -5.0..5.0f64,
        c2 in -5.0..5.0f64,
        env in proptest::collection::vec(-3.0..3.0f64, 2),
    ) {
        // a structured family of expressions plus random constants
        let text = format!("max({c1} - x1, 0) * exp({c2} * t) + x1^2 - min(t, x1)");
        let vars = ["t", "x1"];
        let e1 = parse_expr(&text, &vars).unwrap();
        let e2 = parse_expr(&e1.to_string(), &vars).unwrap();
        let a = e1.eval(&env).unwrap();
        let b = e2.eval(&env).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}
