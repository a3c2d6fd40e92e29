use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use loci_core::hamiltonian::{flow, HamiltonianModel};
use loci_core::linearized::{fundamental_matrices, linearized_flow, symplectic_form_stacked};
use loci_core::loci::{conjugate_time, ConjugateOptions};
use loci_core::source::{exp_map, make_sample, SourceSpec};
use loci_core::sphere::{perturbed_model, round_model, Bump, PerturbationSpec};
use loci_core::verify::equator_patch;

fn perturbed(eps: f64) -> HamiltonianModel {
    let spec = PerturbationSpec {
        epsilon: eps,
        bumps: vec![Bump {
            center: vec![0.4, 0.3],
            width: 0.8,
            amplitude: 1.0,
        }],
        c4_bound: 0.5,
        region: 3.0,
    };
    perturbed_model(2, &spec).unwrap()
}

fn model(k: usize) -> HamiltonianModel {
    if k == 0 {
        round_model(2)
    } else {
        perturbed(0.05)
    }
}

fn unit(v: [f64; 4]) -> DVector<f64> {
    let v = DVector::from_row_slice(&v);
    let n = v.norm().max(1e-3);
    v / n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fundamental_matrix_preserves_the_symplectic_form(
        k in 0usize..2,
        angle in 0.0..TAU,
        a in prop::array::uniform4(-1.0..1.0f64),
        b in prop::array::uniform4(-1.0..1.0f64),
    ) {
        let m = model(k);
        let s = make_sample(&m, &SourceSpec::Point { base: vec![0.1, -0.2] }, 0, &[angle]).unwrap();
        let (a, b) = (unit(a), unit(b));
        let sigma0 = symplectic_form_stacked(a.as_slice(), b.as_slice());
        let times: Vec<f64> = (0..=16).map(|i| PI * i as f64 / 16.0).collect();
        for (t, (_, _, r)) in times.iter().zip(fundamental_matrices(&m, s.chart, &s.start(), &times, 1e-12).unwrap()) {
            let (ra, rb) = (&r * &a, &r * &b);
            let drift = (symplectic_form_stacked(ra.as_slice(), rb.as_slice()) - sigma0).abs();
            prop_assert!(drift <= 1e-8, "t = {t}: drift {drift}");
        }
    }

    #[test]
    fn propagated_frames_stay_isotropic(k in 0usize..2, u in -1.0..1.0, t in 0.5..3.0) {
        let m = model(k);
        let s = make_sample(&m, &equator_patch(2), 0, &[u]).unwrap();
        let traj = flow(&m, &s.start(), t, 1e-10).unwrap();
        let frames = linearized_flow(&m, &traj, &s.frame);
        prop_assert!(frames.max_isotropy_residual() <= 1e-6);
    }

    #[test]
    fn conjugate_detectors_agree(eps in 0.0..0.05, u in -1.0..1.0) {
        let m = perturbed(eps);
        let s = make_sample(&m, &equator_patch(2), 0, &[u]).unwrap();
        let opts = ConjugateOptions::default();
        let c = conjugate_time(&m, &s, 2.5, &opts).unwrap();
        let (t1, t2) = (c.t_conj.unwrap(), c.detector2.unwrap());
        prop_assert!((t1 - t2).abs() <= 10.0 * opts.refine_tol, "{t1} vs {t2}");
    }

    #[test]
    fn hblock_is_the_parameter_derivative_of_exp(k in 0usize..2, u in -0.5..0.5, t in 0.2..1.2) {
        let m = model(k);
        let src = equator_patch(2);
        let s = make_sample(&m, &src, 0, &[u]).unwrap();
        let rs = fundamental_matrices(&m, s.chart, &s.start(), &[t], 1e-12).unwrap();
        let (_, chart, r) = &rs[0];
        prop_assume!(*chart == 0);
        let hblock: DMatrix<f64> = (r * &s.frame.columns).rows(0, 2).into_owned();
        let h = 1e-4;
        let at = |du: f64, dt: f64| exp_map(&m, &make_sample(&m, &src, 0, &[u + du]).unwrap(), t + dt).unwrap();
        let d_u = (at(h, 0.0) - at(-h, 0.0)) / (2.0 * h);
        let d_t = (at(0.0, h) - at(0.0, -h)) / (2.0 * h);
        let fd = DMatrix::from_columns(&[d_u, d_t]);
        let rel = (&hblock - &fd).abs().max() / fd.abs().max();
        prop_assert!(rel <= 1e-4, "relative error {rel}");
    }
}
