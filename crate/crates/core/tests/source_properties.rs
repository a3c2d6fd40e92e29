use std::f64::consts::{PI, TAU};

use nalgebra::DVector;
use proptest::prelude::*;

use loci_core::hamiltonian::catalog::euclidean_eikonal;
use loci_core::hamiltonian::HamiltonianModel;
use loci_core::linearized::isotropy_residual;
use loci_core::source::{make_sample, ParamBox, SourceSample, SourceSpec, SurfaceChart};
use loci_core::sphere::round_model;
use loci_core::verify::equator_patch;

fn great_sphere() -> SourceSpec {
    SourceSpec::Hypersurface {
        chart: SurfaceChart::GreatSphere { dim: 2 },
        param_box: ParamBox {
            lower: vec![-PI],
            upper: vec![PI],
            periodic: vec![true],
        },
        orientation: 1.0,
    }
}

fn circle() -> SourceSpec {
    SourceSpec::Hypersurface {
        chart: SurfaceChart::Circle {
            center: vec![0.2, -0.1],
            radius: 0.7,
        },
        param_box: ParamBox {
            lower: vec![0.0],
            upper: vec![TAU],
            periodic: vec![true],
        },
        orientation: 1.0,
    }
}

/// `(model, source, parameter)` for case `k`, with `u ∈ [0, 1)` mapped into
/// the source's parameter range.
fn case(k: usize, u: f64) -> (HamiltonianModel, SourceSpec, Vec<f64>) {
    match k {
        0 => (round_model(2), equator_patch(2), vec![2.0 * u - 1.0]),
        1 => (round_model(2), great_sphere(), vec![-PI + 0.05 + (TAU - 0.1) * u]),
        2 => (euclidean_eikonal(2), circle(), vec![TAU * u]),
        3 => (round_model(2), circle(), vec![TAU * u]),
        _ => (round_model(2), SourceSpec::Point { base: vec![0.3, -0.2] }, vec![TAU * u]),
    }
}

fn sample(k: usize, u: f64) -> (HamiltonianModel, SourceSpec, SourceSample) {
    let (m, s, par) = case(k, u);
    let smp = make_sample(&m, &s, 0, &par).unwrap();
    (m, s, smp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn initial_frame_is_isotropic_and_on_the_level_set(k in 0usize..5, u in 0.0..1.0) {
        let (m, _, s) = sample(k, u);
        prop_assert!(isotropy_residual(&s.frame.columns) <= 1e-8);
        let h = m.chart(s.chart).value(&s.x, &s.p0);
        prop_assert!((h - m.level()).abs() <= 1e-10, "H - level = {}", h - m.level());
    }

    #[test]
    fn characteristics_leave_hypersurfaces_transversally(k in 0usize..4, u in 0.0..1.0) {
        let (m, src, s) = sample(k, u);
        let SourceSpec::Hypersurface { chart, .. } = &src else { unreachable!() };
        let pt = chart.point_in(&s.parameter, s.chart).unwrap();
        let speed = m.chart(s.chart).grad_p(&s.x, &s.p0).dot(&pt.normal);
        prop_assert!(speed.abs() > 1e-6, "conormal speed {speed}");
        prop_assert!((speed - s.conormal_speed).abs() <= 1e-12 * (1.0 + speed.abs()));
    }

    #[test]
    fn hypersurface_frame_contains_the_hamiltonian_direction(k in 0usize..4, u in 0.0..1.0) {
        let (m, _, s) = sample(k, u);
        let h = m.chart(s.chart);
        let n = s.x.len();
        let mut xh = DVector::zeros(2 * n);
        xh.rows_mut(0, n).copy_from(&h.grad_p(&s.x, &s.p0));
        xh.rows_mut(n, n).copy_from(&(-h.grad_x(&s.x, &s.p0)));
        let cols = &s.frame.columns;
        let coeff = cols.clone().svd(true, true).solve(&xh, 1e-14).unwrap();
        let residual = (cols * coeff - &xh).norm() / xh.norm();
        prop_assert!(residual <= 1e-10, "residual {residual}");
    }

    #[test]
    fn point_source_frame_is_vertical(u in 0.0..1.0) {
        let (_, _, s) = sample(4, u);
        prop_assert_eq!(s.frame.hblock().norm(), 0.0);
        prop_assert!(s.frame.vblock().determinant().abs() > 1e-8);
    }
}
