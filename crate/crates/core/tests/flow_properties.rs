use std::f64::consts::TAU;

use nalgebra::DVector;
use proptest::prelude::*;

use loci_core::hamiltonian::{flow, legendre, HamiltonianModel, PhasePoint};
use loci_core::source::{make_sample, SourceSpec};
use loci_core::sphere::{perturbed_model, round_model, Bump, PerturbationSpec};

const TOL: f64 = 1e-10;

fn models() -> Vec<HamiltonianModel> {
    let spec = PerturbationSpec {
        epsilon: 0.05,
        bumps: vec![Bump {
            center: vec![0.4, 0.3],
            width: 0.8,
            amplitude: 1.0,
        }],
        c4_bound: 0.5,
        region: 3.0,
    };
    vec![round_model(2), perturbed_model(2, &spec).unwrap()]
}

/// A start on the level set through `base` in direction `angle`.
fn start(model: &HamiltonianModel, base: [f64; 2], angle: f64) -> PhasePoint {
    make_sample(model, &SourceSpec::Point { base: base.to_vec() }, 0, &[angle]).unwrap().start()
}

fn primary_end(model: &HamiltonianModel, s: &PhasePoint, t: f64) -> PhasePoint {
    let traj = flow(model, s, t, TOL).unwrap();
    model.to_primary(traj.end_chart(), &traj.end().x, &traj.end().p)
}

fn state_distance(a: &PhasePoint, b: &PhasePoint) -> f64 {
    ((&a.x - &b.x).norm_squared() + (&a.p - &b.p).norm_squared()).sqrt()
}

fn scale(a: &PhasePoint) -> f64 {
    1.0 + a.x.norm() + a.p.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_is_conserved(m in 0usize..2, bx in -0.6..0.6, by in -0.6..0.6, angle in 0.0..TAU, t in 0.1..3.0) {
        let model = &models()[m];
        let traj = flow(model, &start(model, [bx, by], angle), t, TOL).unwrap();
        prop_assert!(traj.energy_drift <= 10.0 * TOL, "drift {}", traj.energy_drift);
    }

    #[test]
    fn flow_is_a_local_group(m in 0usize..2, bx in -0.5..0.5, by in -0.5..0.5, angle in 0.0..TAU, t1 in 0.05..1.2, t2 in 0.05..1.2) {
        let model = &models()[m];
        let s = start(model, [bx, by], angle);
        let composed = primary_end(model, &primary_end(model, &s, t1), t2);
        let direct = primary_end(model, &s, t1 + t2);
        let d = state_distance(&composed, &direct);
        prop_assert!(d <= 100.0 * TOL * scale(&direct), "distance {d}");
    }

    #[test]
    fn flow_is_reversible(m in 0usize..2, bx in -0.5..0.5, by in -0.5..0.5, angle in 0.0..TAU, t in 0.1..2.5) {
        let model = &models()[m];
        let s = start(model, [bx, by], angle);
        let back = primary_end(model, &primary_end(model, &s, t), -t);
        let d = state_distance(&back, &s);
        prop_assert!(d <= 100.0 * TOL * scale(&s), "distance {d}");
    }

    #[test]
    fn legendre_inverts_the_velocity_map(m in 0usize..2, x0 in -1.0..1.0, x1 in -1.0..1.0, p0 in -3.0..3.0, p1 in -3.0..3.0) {
        let model = &models()[m];
        let x = DVector::from_vec(vec![x0, x1]);
        let p = DVector::from_vec(vec![p0, p1]);
        let v = model.grad_p(&x, &p);
        let (_, q) = legendre(model, &x, &v).unwrap();
        prop_assert!((q - &p).norm() <= 1e-8, "p = {p}");
    }
}
