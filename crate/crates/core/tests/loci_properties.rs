use std::f64::consts::PI;
use std::sync::OnceLock;

use proptest::prelude::*;

use loci_core::hamiltonian::HamiltonianModel;
use loci_core::loci::{
    build_value_field, scan_loci, ConjugateOptions, FieldOptions, LociTable, MeshLayout, ScanOptions, ValueField,
};
use loci_core::source::{source_mesh, SourceSample, SourceSpec};
use loci_core::sphere::{perturbed_model, Bump, PerturbationSpec};

const RES: usize = 181;
const HORIZON: f64 = PI + 0.6;
const CAPTURE: f64 = 0.05;
const TIME_TOL: f64 = 5e-3;

struct Fixture {
    model: HamiltonianModel,
    coarse: LociTable,
    fine: LociTable,
    field: ValueField,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
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
        let model = perturbed_model(2, &spec).unwrap();
        let src = SourceSpec::Point { base: vec![0.0, 0.0] };
        let field_opts = FieldOptions {
            capture_radius: CAPTURE,
            horizon: HORIZON,
            tol: 1e-10,
        };
        let opts = ScanOptions {
            conjugate: ConjugateOptions::default(),
            field: Some(field_opts),
            band_tol: 1e-6,
            angle_tol: 1e-2,
            time_tol: TIME_TOL,
            classify: true,
        };
        let coarse = scan_loci(&model, &src, RES, HORIZON, &opts).unwrap();
        let fine = scan_loci(&model, &src, 2 * RES, HORIZON, &opts).unwrap();
        let samples: Vec<SourceSample> = source_mesh(&model, &src, RES).unwrap().into_iter().map(|e| e.sample.unwrap()).collect();
        let field = build_value_field(&model, &samples, &MeshLayout::of(&src, 2, RES), &field_opts).unwrap();
        Fixture {
            model,
            coarse,
            fine,
            field,
        }
    })
}

#[test]
fn cut_never_follows_conjugate_time() {
    let f = fixture();
    for table in [&f.coarse, &f.fine] {
        assert_eq!(table.violations(), 0);
        for r in &table.records {
            assert!(r.error.is_none(), "{:?}", r.error);
            let (tc, tj) = (r.t_cut.unwrap(), r.t_conj.unwrap());
            assert!(tc <= tj + TIME_TOL, "sample {}: {tc} > {tj}", r.sample);
        }
    }
}

#[test]
fn doubling_the_mesh_moves_cut_times_less_than_the_correction() {
    let f = fixture();
    for r in &f.coarse.records {
        let g = &f.fine.records[2 * r.sample];
        assert_eq!(g.parameter, r.parameter);
        let d = (r.t_cut.unwrap() - g.t_cut.unwrap()).abs();
        let bound = r.correction.unwrap();
        assert!(d < bound, "sample {}: change {d} vs correction {bound}", r.sample);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rays_minimize_before_the_cut(i in 0usize..RES, frac in 0.02..1.0) {
        let f = fixture();
        let t_cut = f.coarse.records[i].t_cut.unwrap();
        let t = frac * (t_cut - TIME_TOL);
        let s = f.field.ray_state(&f.model, i, t).unwrap();
        let q = f.field.query(s.chart, &s.x).unwrap();
        prop_assert!((s.action - q.value).abs() <= q.correction, "t = {t}: action {} value {} correction {}", s.action, q.value, q.correction);
    }

    #[test]
    fn rays_lose_after_the_cut(i in 0usize..RES, frac in 0.0..1.0) {
        let f = fixture();
        let t_cut = f.coarse.records[i].t_cut.unwrap();
        let t = t_cut + TIME_TOL + frac * (HORIZON - t_cut - TIME_TOL);
        let s = f.field.ray_state(&f.model, i, t).unwrap();
        let q = f.field.query(s.chart, &s.x).unwrap();
        prop_assert!(s.action > q.value - q.correction);
    }
}
