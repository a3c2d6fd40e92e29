use std::f64::consts::TAU;

use proptest::prelude::*;

use loci_core::regularity::{
    lipschitz_estimate, semiconcavity_estimate, uniform_convexity, ConvexityOptions, GridFunction, SampledFunction,
};

fn grid(f: impl Fn(&[f64]) -> f64) -> GridFunction {
    GridFunction::from_fn(vec![-1.0, -1.0], vec![0.1, 0.1], vec![21, 21], vec![false, false], f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concave_functions_have_zero_semiconcavity_constant(
        a in 0.0..3.0f64, b in 0.0..3.0f64, cx in -2.0..2.0f64, cy in -2.0..2.0f64, kink in 0.0..2.0f64,
    ) {
        let g = grid(|x| -a * x[0] * x[0] - b * x[1] * x[1] + cx * x[0] + cy * x[1] - kink * (x[0] - 0.3 * x[1]).abs());
        let e = semiconcavity_estimate(&g, 0.4).unwrap();
        prop_assert!(e.c <= 1e-9, "C = {}", e.c);
        prop_assert!(!e.infinite);
    }

    #[test]
    fn adding_a_linear_function_keeps_the_constant(
        a in 0.0..3.0f64, b in -3.0..3.0f64, cx in -5.0..5.0f64, cy in -5.0..5.0f64, k in 0.0..1.0f64,
    ) {
        let f = |x: &[f64]| a * x[0] * x[0] + b * x[0] * x[1] + (k * x[1]).sin();
        let e1 = semiconcavity_estimate(&grid(f), 0.4).unwrap();
        let e2 = semiconcavity_estimate(&grid(|x| f(x) + cx * x[0] + cy * x[1] + 1.0), 0.4).unwrap();
        prop_assert!((e1.c - e2.c).abs() <= 1e-9 * (1.0 + e1.c), "{} vs {}", e1.c, e2.c);
    }

    #[test]
    fn lipschitz_estimate_scales_linearly(
        values in prop::collection::vec(-10.0..10.0f64, 40),
        exponent in -8i32..8,
        negative in any::<bool>(),
        radius in 0.2..1.0,
    ) {
        let c = if negative { -(2f64.powi(exponent)) } else { 2f64.powi(exponent) };
        let points: Vec<Vec<f64>> = (0..values.len()).map(|i| vec![TAU * i as f64 / values.len() as f64]).collect();
        let f = SampledFunction { points: points.clone(), values: values.clone(), periods: vec![Some(TAU)] };
        let g = SampledFunction { points, values: values.iter().map(|v| c * v).collect(), periods: vec![Some(TAU)] };
        let (lf, lg) = (lipschitz_estimate(&f, radius).unwrap(), lipschitz_estimate(&g, radius).unwrap());
        prop_assert_eq!(lg.value, c.abs() * lf.value);
        prop_assert_eq!(lg.pairs, lf.pairs);
    }
}

proptest! {
    // Each certificate compares every chord pair of 721 samples.
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn discs_are_certified_with_half_their_curvature(r in 0.5..5.0f64, cx in -3.0..3.0f64, cy in -3.0..3.0f64) {
        let boundary: Vec<Vec<f64>> = (0..721)
            .map(|i| {
                let a = TAU * i as f64 / 721.0;
                vec![cx + r * a.cos(), cy + r * a.sin()]
            })
            .collect();
        let cert = uniform_convexity(&boundary, &[cx, cy], &ConvexityOptions { kappa_min: 0.0, ..Default::default() }).unwrap();
        let target = 1.0 / (2.0 * r);
        prop_assert!((cert.kappa_chord - target).abs() <= 0.05 * target, "kappa {} vs {target}", cert.kappa_chord);
        prop_assert!(cert.pass);
    }
}
