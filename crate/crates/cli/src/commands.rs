use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use loci_core::artifact::{self, num, Stamp};
use loci_core::hamiltonian::{validate_model, ValidationReport};
use loci_core::hamiltonian::HamiltonianModel;
use loci_core::loci::{scan_loci, trace_ray, LociTable};
use loci_core::regularity::{
    hessian_bound_estimate, lipschitz_estimate, nonfocal_domain, semiconcavity_estimate, uniform_convexity, ConvexityCertificate,
    ConvexityOptions, GridFunction, HessianBound, LipschitzEstimate, NonfocalDomain, SampledFunction, SemiconcavityEstimate,
};
use loci_core::scenario::{validation_samples, LoadedScenario, ModelRef, Scenario};
use loci_core::source::source_mesh;
use loci_core::sphere::round_model;
use loci_core::verify::{dexp_cross_check, equator_oracle, symplectic_invariance, OracleSummary, RayCheckSummary};

use crate::output::Session;
use crate::{Failure, Outcome};

pub const KIND_LOCI: &str = "loci-table";
pub const KIND_CONVEXITY: &str = "convexity";

/// Oracle residual limits checked by `sphere-verify`.
pub const K_LIMIT: f64 = 1e-6;
pub const U_LIMIT: f64 = 1e-8;
pub const SIGMA_LIMIT: f64 = 1e-8;
pub const DEXP_LIMIT: f64 = 1e-4;

/// Largest accepted ratio of Lipschitz estimates under mesh doubling.
pub const LIPSCHITZ_RATIO_LIMIT: f64 = 2.0;

const VALIDATION_SAMPLES: usize = 256;
const SYMPLECTIC_STEPS: usize = 64;
const DEXP_TIMES: (f64, f64) = (0.2, PI - 0.2);

pub struct Context {
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    pub fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

struct Loaded {
    scenario: LoadedScenario,
    stamp: Stamp,
    model: HamiltonianModel,
}

fn load(path: &Path) -> Result<Loaded, Failure> {
    let scenario = Scenario::from_path(path)?;
    let model = scenario.scenario.model()?;
    Ok(Loaded {
        stamp: Stamp::of(&scenario),
        scenario,
        model,
    })
}

fn open(ctx: &Context, command: &str, path: &Path, l: &Loaded) -> Result<Session, Failure> {
    let mut session = Session::open(&ctx.out, command)?;
    session.scenario(path, &l.scenario.hash);
    Ok(session)
}

fn close(session: Session, outcome: Outcome) -> Result<Outcome, Failure> {
    session.finish(match outcome {
        Outcome::Ok => "ok",
        Outcome::Violated(_) => "invariant-violated",
    })?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleProblem {
    pub sample: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioValidation {
    pub hypotheses: ValidationReport,
    pub passed: bool,
    pub source_samples: usize,
    pub inadmissible: Vec<SampleProblem>,
    pub c4_proxy: Option<f64>,
}

pub fn validate(ctx: &Context, path: &Path) -> Result<Outcome, Failure> {
    let l = load(path)?;
    let s = &l.scenario.scenario;
    let n = s.dimension();
    let hypotheses = validate_model(&l.model, &validation_samples(n, VALIDATION_SAMPLES, s.seed))?;
    let mesh = source_mesh(&l.model, &s.source, s.resolution)?;
    let inadmissible: Vec<SampleProblem> = mesh
        .iter()
        .filter_map(|e| {
            e.sample.as_ref().err().map(|m| SampleProblem {
                sample: e.index,
                message: m.clone(),
            })
        })
        .collect();
    let c4_proxy = s.perturbation.as_ref().map(|p| p.c4_proxy(n));
    let report = ScenarioValidation {
        passed: hypotheses.passed(),
        hypotheses,
        source_samples: mesh.len(),
        inadmissible,
        c4_proxy,
    };
    let mut session = open(ctx, "validate", path, &l)?;
    artifact::write_json(&session.file("validation.json"), &l.stamp, "validation-report", &report)?;
    ctx.say(format!(
        "validate {}: hypotheses {} | {} source samples, {} inadmissible",
        s.name,
        if report.passed { "ok" } else { "FAILED" },
        report.source_samples,
        report.inadmissible.len()
    ));
    let outcome = if report.passed {
        Outcome::Ok
    } else {
        Outcome::Violated("model hypotheses fail on the validation sample".into())
    };
    close(session, outcome)
}

pub fn trace(ctx: &Context, path: &Path, rays: &[usize], per_step: usize) -> Result<Outcome, Failure> {
    let l = load(path)?;
    let s = &l.scenario.scenario;
    let n = s.dimension();
    let mesh = source_mesh(&l.model, &s.source, s.resolution)?;
    let selected: Vec<usize> = if rays.is_empty() { (0..mesh.len()).collect() } else { rays.to_vec() };
    if let Some(&bad) = selected.iter().find(|&&i| i >= mesh.len()) {
        return Err(Failure::Usage(format!("ray {bad} is outside the mesh of {} samples", mesh.len())));
    }
    let traced: Vec<loci_core::Result<Vec<Vec<String>>>> = selected
        .par_iter()
        .map(|&i| {
            let sample = mesh[i]
                .sample
                .as_ref()
                .map_err(|m| loci_core::Error::SourceNotAdmissible(format!("sample {i}: {m}")))?;
            let rows = trace_ray(&l.model, sample, s.horizon, s.tolerances.integration, per_step)?;
            Ok(rows
                .into_iter()
                .map(|r| {
                    let mut row = vec![i.to_string(), r.t.to_string(), r.chart.to_string()];
                    row.extend(r.x.iter().map(|v| v.to_string()));
                    row.extend(r.p.iter().map(|v| v.to_string()));
                    row.push(r.action.to_string());
                    row.push(r.s_min.to_string());
                    row
                })
                .collect())
        })
        .collect();
    let mut rows = Vec::new();
    for t in traced {
        rows.extend(t?);
    }
    let mut columns = vec!["sample".to_string(), "t".into(), "chart".into()];
    columns.extend((0..n).map(|i| format!("x_{i}")));
    columns.extend((0..n).map(|i| format!("p_{i}")));
    columns.extend(["action".to_string(), "s_min".into()]);
    let mut session = open(ctx, "trace", path, &l)?;
    let count = rows.len();
    artifact::write_csv(&session.file("trace.csv"), Some(&l.stamp), &columns, rows)?;
    ctx.say(format!("trace {}: {} rays, {count} rows", s.name, selected.len()));
    close(session, Outcome::Ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    Conj,
    Cut,
    Loci,
}

impl ScanKind {
    fn name(self) -> &'static str {
        match self {
            ScanKind::Conj => "conj-scan",
            ScanKind::Cut => "cut-scan",
            ScanKind::Loci => "loci",
        }
    }
}

fn run_scan(l: &Loaded, resolution: usize, cuts: bool, classify: bool) -> Result<LociTable, Failure> {
    let s = &l.scenario.scenario;
    if cuts && s.field_horizon.is_none() {
        return Err(Failure::Usage(format!("scenario {} has no field_horizon; cut times need one", s.name)));
    }
    Ok(scan_loci(&l.model, &s.source, resolution, s.horizon, &s.scan_options(cuts, classify))?)
}

pub fn scan(ctx: &Context, path: &Path, kind: ScanKind) -> Result<Outcome, Failure> {
    let l = load(path)?;
    let s = &l.scenario.scenario;
    let table = run_scan(&l, s.resolution, kind != ScanKind::Conj, kind == ScanKind::Loci)?;
    let name = kind.name();
    let mut session = open(ctx, name, path, &l)?;
    artifact::write_loci_csv(&session.file(&format!("{name}.csv")), Some(&l.stamp), &table)?;
    artifact::write_json(&session.file(&format!("{name}.json")), &l.stamp, KIND_LOCI, &table)?;
    let conj = table.records.iter().filter(|r| r.t_conj.is_some()).count();
    let cut = table.records.iter().filter(|r| r.t_cut.is_some()).count();
    let failed = table.records.iter().filter(|r| r.error.is_some()).count();
    let violations = table.violations();
    ctx.say(format!(
        "{name} {}: {} rows, {conj} conjugate, {cut} cut, {failed} failed, {violations} ordering violations",
        s.name,
        table.records.len()
    ));
    let outcome = if violations > 0 {
        Outcome::Violated(format!("{violations} rows with t_cut > t_conj + {}", s.tolerances.time))
    } else {
        Outcome::Ok
    };
    close(session, outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzPair {
    pub radius: f64,
    pub coarse: LipschitzEstimate,
    pub fine: LipschitzEstimate,
    /// Larger over smaller estimate.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeshRegularity {
    pub resolution: usize,
    pub cut_samples: usize,
    pub conj_samples: usize,
    pub ordering_violations: usize,
    pub t_conj_semiconcavity: SemiconcavityEstimate,
    pub t_conj_hessian: Option<HessianBound>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    pub meshes: Vec<MeshRegularity>,
    pub t_cut_lipschitz: Vec<LipschitzPair>,
    pub ratio_limit: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

fn t_cut_samples(l: &Loaded, table: &LociTable) -> SampledFunction {
    let s = &l.scenario.scenario;
    let b = s.source.parameter_box(s.dimension());
    SampledFunction {
        points: table.records.iter().map(|r| r.parameter.clone()).collect(),
        values: table.records.iter().map(|r| r.t_cut.unwrap_or(f64::NAN)).collect(),
        periods: (0..b.lower.len()).map(|a| b.is_periodic(a).then(|| b.upper[a] - b.lower[a])).collect(),
    }
}

pub fn regularity(ctx: &Context, path: &Path) -> Result<Outcome, Failure> {
    let l = load(path)?;
    let s = &l.scenario.scenario;
    let settings = s
        .regularity
        .clone()
        .ok_or_else(|| Failure::Usage(format!("scenario {} has no regularity settings", s.name)))?;
    let n = s.dimension();
    let mut meshes = Vec::new();
    let mut functions = Vec::new();
    for resolution in [s.resolution, 2 * s.resolution] {
        let table = run_scan(&l, resolution, true, false)?;
        let t_conj: Vec<f64> = table.records.iter().map(|r| r.t_conj.unwrap_or(f64::NAN)).collect();
        let grid = GridFunction::on_source_mesh(&s.source, n, resolution, t_conj);
        meshes.push(MeshRegularity {
            resolution,
            cut_samples: table.records.iter().filter(|r| r.t_cut.is_some()).count(),
            conj_samples: table.records.iter().filter(|r| r.t_conj.is_some()).count(),
            ordering_violations: table.violations(),
            t_conj_semiconcavity: semiconcavity_estimate(&grid, settings.semiconcavity_delta)?,
            t_conj_hessian: hessian_bound_estimate(&grid).ok(),
        });
        functions.push(t_cut_samples(&l, &table));
    }
    let mut pairs = Vec::new();
    for &radius in &settings.lipschitz_radii {
        let coarse = lipschitz_estimate(&functions[0], radius)?;
        let fine = lipschitz_estimate(&functions[1], radius)?;
        let (lo, hi) = (coarse.value.min(fine.value), coarse.value.max(fine.value));
        let ratio = if hi == 0.0 { 1.0 } else { hi / lo };
        pairs.push(LipschitzPair { radius, coarse, fine, ratio });
    }
    let mut failures = Vec::new();
    for p in &pairs {
        if !(p.coarse.value.is_finite() && p.fine.value.is_finite()) {
            failures.push(format!("Lipschitz estimate of t_cut is not finite at radius {}", p.radius));
        } else if !(p.ratio <= LIPSCHITZ_RATIO_LIMIT) {
            failures.push(format!("Lipschitz estimate of t_cut changes by {:.3}x at radius {}", p.ratio, p.radius));
        }
    }
    for m in &meshes {
        let sc = &m.t_conj_semiconcavity;
        if sc.infinite || !sc.c.is_finite() {
            failures.push(format!("semiconcavity constant of t_conj unbounded at resolution {}", m.resolution));
        }
        if m.ordering_violations > 0 {
            failures.push(format!("{} ordering violations at resolution {}", m.ordering_violations, m.resolution));
        }
    }
    let report = RegularityReport {
        pass: failures.is_empty(),
        meshes,
        t_cut_lipschitz: pairs,
        ratio_limit: LIPSCHITZ_RATIO_LIMIT,
        failures,
    };
    let mut session = open(ctx, "regularity", path, &l)?;
    artifact::write_json(&session.file("regularity.json"), &l.stamp, "regularity-report", &report)?;
    for p in &report.t_cut_lipschitz {
        ctx.say(format!(
            "regularity {}: Lip(t_cut) r={} coarse {:.6} fine {:.6} ratio {:.3}",
            s.name, p.radius, p.coarse.value, p.fine.value, p.ratio
        ));
    }
    for m in &report.meshes {
        ctx.say(format!(
            "regularity {}: res {} semiconcavity(t_conj) C {:.6} infinite {}",
            s.name, m.resolution, m.t_conj_semiconcavity.c, m.t_conj_semiconcavity.infinite
        ));
    }
    let outcome = if report.pass {
        Outcome::Ok
    } else {
        Outcome::Violated(report.failures.join("; "))
    };
    close(session, outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub max: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn new(max: f64, limit: f64) -> Self {
        Self {
            max,
            limit,
            pass: max <= limit,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereVerification {
    pub dimension: usize,
    pub k_residual: Check,
    /// Residual against the matrix as printed; reported, not checked.
    pub k_residual_as_printed: f64,
    pub u_residual: Check,
    pub symplectic: Check,
    pub dexp: Check,
    pub pass: bool,
}

fn oracle_csv(path: &Path, stamp: &Stamp, o: &OracleSummary) -> loci_core::Result<()> {
    let n = o.n;
    let mut columns: Vec<String> = (0..n).map(|i| format!("z_{i}")).collect();
    columns.extend(["s", "k_residual", "k_residual_as_printed", "u_residual"].map(String::from));
    let rows = o.rows.iter().map(|r| {
        let mut row: Vec<String> = r.z.iter().map(|v| v.to_string()).collect();
        row.extend([r.s, r.k_residual, r.k_residual_as_printed, r.u_residual].map(|v| num(Some(v))));
        row
    });
    artifact::write_csv(path, Some(stamp), &columns, rows)?;
    let mut f = OpenOptions::new().append(true).open(path)?;
    writeln!(
        f,
        "# max k_residual={} k_residual_as_printed={} u_residual={}",
        o.max_k_residual, o.max_k_residual_as_printed, o.max_u_residual
    )?;
    Ok(())
}

fn ray_csv(path: &Path, stamp: &Stamp, r: &RayCheckSummary) -> loci_core::Result<()> {
    let rows = r.rays.iter().map(|c| vec![c.ray.to_string(), num(Some(c.residual))]);
    artifact::write_csv(path, Some(stamp), &["ray".into(), "residual".into()], rows)
}

pub fn sphere_verify(ctx: &Context, path: &Path) -> Result<Outcome, Failure> {
    let l = load(path)?;
    let s = &l.scenario.scenario;
    if !matches!(&s.model, ModelRef::Catalog { name, .. } if name == "sphere-chart") {
        return Err(Failure::Usage("sphere-verify needs the sphere-chart model".into()));
    }
    let o = s
        .oracle
        .clone()
        .ok_or_else(|| Failure::Usage(format!("scenario {} has no oracle settings", s.name)))?;
    let n = s.dimension();
    let oracle = equator_oracle(n, o.per_axis, o.s_lo, o.s_hi, o.s_count, o.integration)?;
    let model = round_model(n);
    let sigma = symplectic_invariance(&model, o.symplectic_rays, PI, SYMPLECTIC_STEPS, s.seed, o.integration)?;
    let dexp = dexp_cross_check(&model, o.dexp_rays, DEXP_TIMES, s.seed.wrapping_add(1), o.integration)?;
    let mut v = SphereVerification {
        dimension: n,
        k_residual: Check::new(oracle.max_k_residual, K_LIMIT),
        k_residual_as_printed: oracle.max_k_residual_as_printed,
        u_residual: Check::new(oracle.max_u_residual, U_LIMIT),
        symplectic: Check::new(sigma.max_residual, SIGMA_LIMIT),
        dexp: Check::new(dexp.max_residual, DEXP_LIMIT),
        pass: false,
    };
    v.pass = v.k_residual.pass && v.u_residual.pass && v.symplectic.pass && v.dexp.pass;
    let mut session = open(ctx, "sphere-verify", path, &l)?;
    oracle_csv(&session.file("oracle.csv"), &l.stamp, &oracle)?;
    ray_csv(&session.file("symplectic.csv"), &l.stamp, &sigma)?;
    ray_csv(&session.file("dexp.csv"), &l.stamp, &dexp)?;
    artifact::write_json(&session.file("sphere-verify.json"), &l.stamp, "sphere-verification", &v)?;
    ctx.say(format!(
        "sphere-verify {}: max K residual {:e} (as printed {:e}), U {:e}, sigma {:e}, dexp {:e}",
        s.name, v.k_residual.max, v.k_residual_as_printed, v.u_residual.max, v.symplectic.max, v.dexp.max
    ));
    let outcome = if v.pass {
        Outcome::Ok
    } else {
        Outcome::Violated("sphere oracle residual above its limit".into())
    };
    close(session, outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub c4_proxy: Option<f64>,
    pub radius_min: f64,
    pub radius_max: f64,
    pub certificate: ConvexityCertificate,
    pub boundary: NonfocalDomain,
}

/// `(sample, angle, radius, t_conj)` rows of a planar boundary.
pub fn polar_rows(b: &NonfocalDomain) -> Vec<Vec<String>> {
    b.points
        .iter()
        .zip(&b.t_conj)
        .enumerate()
        .map(|(i, (p, t))| {
            vec![
                i.to_string(),
                num(Some(p[1].atan2(p[0]))),
                num(Some(p[0].hypot(p[1]))),
                num(Some(*t)),
            ]
        })
        .collect()
}

pub fn polar_columns() -> Vec<(String, String)> {
    [
        ("sample", "index along the boundary"),
        ("angle", "polar angle in the orthonormal frame at the base, radians"),
        ("radius", "distance from the base in that frame"),
        ("t_conj", "first conjugate time of the direction"),
    ]
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .to_vec()
}

pub fn convexity(ctx: &Context, path: &Path) -> Result<Outcome, Failure> {
    let l = load(path)?;
    let s = &l.scenario.scenario;
    let c = s
        .convexity
        .clone()
        .ok_or_else(|| Failure::Usage(format!("scenario {} has no convexity settings", s.name)))?;
    let n = s.dimension();
    if n != 2 {
        return Err(Failure::Usage("convexity certificates are planar; the scenario must have dimension 2".into()));
    }
    let horizon = c.horizon.unwrap_or(s.horizon);
    let boundary = nonfocal_domain(&l.model, &c.base, c.directions, horizon, &s.conjugate_options())?;
    let opts = ConvexityOptions {
        kappa_min: c.kappa_min,
        ..ConvexityOptions::default()
    };
    let certificate = uniform_convexity(&boundary.points, &vec![0.0; n], &opts)?;
    let report = ConvexityReport {
        c4_proxy: s.perturbation.as_ref().map(|p| p.c4_proxy(n)),
        radius_min: boundary.radii.iter().copied().fold(f64::INFINITY, f64::min),
        radius_max: boundary.radii.iter().copied().fold(0.0, f64::max),
        certificate,
        boundary,
    };
    let mut session = open(ctx, "convexity", path, &l)?;
    artifact::write_json(&session.file("convexity.json"), &l.stamp, KIND_CONVEXITY, &report)?;
    let cols: Vec<String> = polar_columns().into_iter().map(|c| c.0).collect();
    artifact::write_csv(&session.file("nonfocal-boundary.csv"), Some(&l.stamp), &cols, polar_rows(&report.boundary))?;
    let cert = &report.certificate;
    ctx.say(format!(
        "convexity {}: kappa {:.6} (ball {:.6}) >= {} : {} over {} samples, radii [{:.4}, {:.4}]",
        s.name,
        cert.kappa_chord,
        cert.kappa_ball,
        cert.kappa_min,
        if cert.pass { "pass" } else { "FAIL" },
        cert.samples,
        report.radius_min,
        report.radius_max
    ));
    let outcome = if cert.pass {
        Outcome::Ok
    } else {
        Outcome::Violated(format!("nonfocal domain not certified with kappa >= {}", cert.kappa_min))
    };
    close(session, outcome)
}
