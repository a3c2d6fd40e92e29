//! Conjugate times from degeneracy of the propagated source frame, a
//! discrete value field over the characteristic family, cut times from loss
//! of action minimality, and the per-sample loci table.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{atlas, HamiltonianModel, PhasePoint, Propagation};
use crate::linearized::{arrival_frame_from_fundamental, extract_k, KExtraction, LagrangianFrame, SVD_TOL};
use crate::source::{source_mesh, SourceSample, SourceSpec};

/// Sub-points per dense step when scanning `s_min`.
const SUBSTEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugateOptions {
    /// Integration tolerance.
    pub tol: f64,
    /// Width of the final bisection bracket.
    pub refine_tol: f64,
    pub svd_tol: f64,
    /// Run the `K − K_U` detector as well (hypersurface sources only).
    pub cross_check: bool,
}

impl Default for ConjugateOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            refine_tol: 1e-7,
            svd_tol: SVD_TOL,
            cross_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateResult {
    /// First conjugate time, `None` if there is none up to `searched_to`.
    pub t_conj: Option<f64>,
    pub searched_to: f64,
    /// Number of vanishing singular values at `t_conj`.
    pub multiplicity: usize,
    /// `s_min` at `t_conj` and the acceptance threshold it was held to.
    pub s_min: Option<f64>,
    pub threshold: Option<f64>,
    /// Whether `det` of the position block changes sign across `t_conj`.
    pub det_sign_change: Option<bool>,
    /// Root of the smallest-magnitude eigenvalue of `K(x, t) − K_U`.
    pub detector2: Option<f64>,
    /// Smallest eigenvalue of `dK/dt` at the second detector's root.
    pub k_dot_min_eig: Option<f64>,
    pub svd_tol: f64,
    pub refine_tol: f64,
}

/// Maximal runs of consecutive dense steps integrated in a single chart.
fn chart_runs(prop: &Propagation) -> Vec<Range<usize>> {
    let charts = &prop.step_charts;
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=charts.len() {
        if i == charts.len() || charts[i] != charts[start] {
            if i > start {
                runs.push(start..i);
            }
            start = i;
        }
    }
    runs
}

/// Dense evaluation restricted to one chart run, so that values on both
/// sides of a chart switch are never mixed.
struct RunEval<'a> {
    prop: &'a Propagation,
    run: Range<usize>,
}

impl RunEval<'_> {
    fn t_start(&self) -> f64 {
        self.prop.solution.steps[self.run.start].t0
    }

    fn t_end(&self) -> f64 {
        self.prop.solution.steps[self.run.end - 1].t1()
    }

    fn chart(&self) -> usize {
        self.prop.step_charts[self.run.start]
    }

    fn raw(&self, t: f64) -> Vec<f64> {
        let steps = &self.prop.solution.steps[self.run.clone()];
        let t = t.clamp(self.t_start(), self.t_end());
        let i = steps.partition_point(|s| s.t1() < t).min(steps.len() - 1);
        steps[i].eval(t)
    }

    fn frame(&self, t: f64) -> LagrangianFrame {
        let (_, _, cols) = self.prop.split(&self.raw(t));
        LagrangianFrame::new(cols)
    }

    fn s_min(&self, t: f64) -> f64 {
        self.frame(t).s_min()
    }
}

/// Smallest singular value of the position block along a propagation,
/// sampled inside each dense step; one entry per sub-point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SminSample {
    pub t: f64,
    pub chart: usize,
    pub s_min: f64,
}

fn scan_run(run: &RunEval) -> Vec<SminSample> {
    let steps = &run.prop.solution.steps[run.run.clone()];
    let mut out = Vec::with_capacity(steps.len() * SUBSTEPS + 1);
    for (k, step) in steps.iter().enumerate() {
        let last = k + 1 == steps.len();
        let count = if last { SUBSTEPS + 1 } else { SUBSTEPS };
        for j in 0..count {
            let t = step.t0 + step.h * j as f64 / SUBSTEPS as f64;
            let (_, _, cols) = run.prop.split(&step.eval(t));
            out.push(SminSample {
                t,
                chart: run.chart(),
                s_min: LagrangianFrame::new(cols).s_min(),
            });
        }
    }
    out
}

/// Bisects on the sign of the slope of `s_min` for its minimum in `[lo, hi]`.
fn refine_minimum(run: &RunEval, mut lo: f64, mut hi: f64, refine_tol: f64) -> f64 {
    let eps = refine_tol * 0.25;
    while hi - lo > refine_tol {
        let mid = 0.5 * (lo + hi);
        let a = (mid - eps).max(run.t_start());
        let b = (mid + eps).min(run.t_end());
        if run.s_min(b) < run.s_min(a) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Detection {
    t: f64,
    s_min: f64,
    threshold: f64,
    multiplicity: usize,
    det_sign_change: Option<bool>,
}

fn detect_first(prop: &Propagation, opts: &ConjugateOptions) -> Option<Detection> {
    let mut candidates: Vec<(f64, RunEval, f64, f64)> = Vec::new();
    for run in chart_runs(prop) {
        let ev = RunEval { prop, run };
        let samples = scan_run(&ev);
        for k in 1..samples.len().saturating_sub(1) {
            let (a, b, c) = (samples[k - 1].s_min, samples[k].s_min, samples[k + 1].s_min);
            if samples[k].t > 0.0 && b <= a && b < c && b <= 0.9 * a.max(c) {
                candidates.push((samples[k].t, RunEval { prop, run: ev.run.clone() }, samples[k - 1].t, samples[k + 1].t));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0));
    for (_, ev, lo, hi) in candidates {
        let t = refine_minimum(&ev, lo, hi, opts.refine_tol);
        let frame = ev.frame(t);
        let sv = frame.hblock_singular_values();
        let delta = (100.0 * opts.refine_tol).max(1e-5);
        let slope = ev
            .s_min((t - delta).max(ev.t_start()))
            .max(ev.s_min((t + delta).min(ev.t_end())))
            / delta;
        let threshold = opts.svd_tol + slope * opts.refine_tol * 4.0 + 100.0 * opts.tol;
        if sv[0] > threshold {
            continue;
        }
        let multiplicity = sv.iter().filter(|&&s| s <= 10.0 * threshold).count();
        let side = (10.0 * opts.refine_tol).max(1e-5);
        let det_sign_change = (t - side >= ev.t_start() && t + side <= ev.t_end()).then(|| {
            let da = ev.frame(t - side).hblock().determinant();
            let db = ev.frame(t + side).hblock().determinant();
            da * db < 0.0
        });
        return Some(Detection {
            t,
            s_min: sv[0],
            threshold,
            multiplicity,
            det_sign_change,
        });
    }
    None
}

/// `K(x, t)` of the frame flowing to the vertical at `t`, restarting from a
/// checkpoint `(t0, state, chart, R(t0))`.
struct ArrivalK<'a> {
    model: &'a HamiltonianModel,
    t0: f64,
    state: PhasePoint,
    chart: usize,
    r: DMatrix<f64>,
    tol: f64,
}

impl ArrivalK<'_> {
    fn advance(&self, t: f64) -> Result<(PhasePoint, usize, DMatrix<f64>)> {
        if t == self.t0 {
            return Ok((self.state.clone(), self.chart, self.r.clone()));
        }
        let prop = Propagation::run(self.model, self.chart, &self.state, Some(&self.r), self.t0, t, self.tol);
        if !prop.completed() {
            return Err(Error::Propagation {
                t: prop.t_last(),
                reason: format!("{:?}", prop.solution.outcome),
            });
        }
        let (pt, chart, _, r) = prop.grid_state(prop.solution.t.len() - 1);
        Ok((pt, chart, r))
    }

    fn k(&self, t: f64) -> Result<Option<DMatrix<f64>>> {
        let (_, _, r) = self.advance(t)?;
        Ok(extract_k(&arrival_frame_from_fundamental(&r), SVD_TOL).matrix().cloned())
    }
}

/// Signed eigenvalue of smallest magnitude.
fn smallest_magnitude_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    eig.eigenvalues.iter().copied().min_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(f64::NAN)
}

fn second_detector(
    model: &HamiltonianModel,
    sample: &SourceSample,
    near: f64,
    opts: &ConjugateOptions,
) -> Result<Option<(f64, Option<f64>)>> {
    let KExtraction::Graph { k: k_u, .. } = extract_k(&sample.frame, opts.svd_tol) else {
        return Ok(None);
    };
    let width = 0.05_f64.min(0.5 * near);
    let t_a = near - width;
    let t_b = near + width;
    let origin = ArrivalK {
        model,
        t0: 0.0,
        state: sample.start(),
        chart: sample.chart,
        r: DMatrix::identity(2 * model.dim(), 2 * model.dim()),
        tol: opts.tol,
    };
    let (state, chart, r) = origin.advance(t_a)?;
    let from_a = ArrivalK {
        model,
        t0: t_a,
        state,
        chart,
        r,
        tol: opts.tol,
    };
    let g = |t: f64| -> Result<Option<f64>> { Ok(from_a.k(t)?.map(|k| smallest_magnitude_eigenvalue(&(k - &k_u)))) };
    let (Some(ga), Some(gb)) = (g(t_a)?, g(t_b)?) else {
        return Ok(None);
    };
    if ga * gb > 0.0 {
        return Ok(None);
    }
    let (mut lo, mut hi) = (t_a, t_b);
    while hi - lo > opts.refine_tol {
        let mid = 0.5 * (lo + hi);
        match g(mid)? {
            Some(gm) if gm * ga > 0.0 => lo = mid,
            Some(_) => hi = mid,
            None => return Ok(None),
        }
    }
    let root = 0.5 * (lo + hi);
    let d = 1e-4_f64.min(0.5 * (root - t_a));
    let slope = match (from_a.k(root - d)?, from_a.k(root + d)?) {
        (Some(km), Some(kp)) => {
            let kd = (kp - km) / (2.0 * d);
            Some(SymmetricEigen::new((&kd + kd.transpose()) * 0.5).eigenvalues.min())
        }
        _ => None,
    };
    Ok(Some((root, slope)))
}

/// First time the propagated source frame meets the vertical space.
pub fn conjugate_time(
    model: &HamiltonianModel,
    sample: &SourceSample,
    horizon: f64,
    opts: &ConjugateOptions,
) -> Result<ConjugateResult> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    if !(opts.refine_tol > 0.0 && opts.tol > 0.0 && opts.svd_tol > 0.0) {
        return Err(Error::InvalidInput("tolerances must be positive".into()));
    }
    let prop = Propagation::run(
        model,
        sample.chart,
        &sample.start(),
        Some(&sample.frame.columns),
        0.0,
        horizon,
        opts.tol,
    );
    let found = detect_first(&prop, opts);
    if found.is_none() && !prop.completed() {
        return Err(Error::Propagation {
            t: prop.t_last(),
            reason: format!("frame propagation stopped early: {:?}", prop.solution.outcome),
        });
    }
    let mut result = ConjugateResult {
        t_conj: None,
        searched_to: prop.t_last(),
        multiplicity: 0,
        s_min: None,
        threshold: None,
        det_sign_change: None,
        detector2: None,
        k_dot_min_eig: None,
        svd_tol: opts.svd_tol,
        refine_tol: opts.refine_tol,
    };
    if let Some(d) = found {
        result.t_conj = Some(d.t);
        result.multiplicity = d.multiplicity;
        result.s_min = Some(d.s_min);
        result.threshold = Some(d.threshold);
        result.det_sign_change = d.det_sign_change;
        if opts.cross_check && sample.direction.is_none() {
            if let Some((root, slope)) = second_detector(model, sample, d.t, opts)? {
                result.detector2 = Some(root);
                result.k_dot_min_eig = slope;
            }
        }
    }
    Ok(result)
}

/// One row of a ray trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub chart: usize,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub action: f64,
    pub s_min: f64,
}

/// Trajectory, action and `s_min` of a sample's ray at the grid times and
/// `per_step − 1` interior points of each step.
pub fn trace_ray(
    model: &HamiltonianModel,
    sample: &SourceSample,
    horizon: f64,
    tol: f64,
    per_step: usize,
) -> Result<Vec<TraceRow>> {
    let per_step = per_step.max(1);
    let prop = Propagation::run(model, sample.chart, &sample.start(), Some(&sample.frame.columns), 0.0, horizon, tol);
    let row = |t: f64, chart: usize, y: &[f64]| {
        let (pt, action, cols) = prop.split(y);
        TraceRow {
            t,
            chart,
            x: pt.x.iter().copied().collect(),
            p: pt.p.iter().copied().collect(),
            action,
            s_min: LagrangianFrame::new(cols).s_min(),
        }
    };
    let mut rows = vec![row(0.0, sample.chart, &prop.solution.y[0])];
    for (i, step) in prop.solution.steps.iter().enumerate() {
        let chart = prop.step_charts[i];
        for j in 1..per_step {
            let t = step.t0 + step.h * j as f64 / per_step as f64;
            rows.push(row(t, chart, &step.eval(t)));
        }
        rows.push(row(prop.solution.t[i + 1], prop.grid_charts[i + 1], &prop.solution.y[i + 1]));
    }
    if !prop.completed() {
        return Err(Error::Propagation {
            t: prop.t_last(),
            reason: format!("{:?}", prop.solution.outcome),
        });
    }
    Ok(rows)
}

/// Shape of a tensor-grid source mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshLayout {
    pub resolution: usize,
    pub periodic: Vec<bool>,
}

impl MeshLayout {
    pub fn of(source: &SourceSpec, n: usize, resolution: usize) -> Self {
        Self {
            resolution,
            periodic: source.periodic_axes(n),
        }
    }

    /// Grid multi-index of a flat sample index (first axis slowest).
    pub fn multi_index(&self, index: usize) -> Vec<usize> {
        let mut rem = index;
        let mut out = vec![0; self.periodic.len()];
        for a in (0..out.len()).rev() {
            out[a] = rem % self.resolution;
            rem /= self.resolution;
        }
        out
    }

    fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.resolution + i)
    }

    /// Forward neighbor along `axis`, wrapping on periodic axes.
    fn forward(&self, index: usize, axis: usize) -> Option<usize> {
        let mut m = self.multi_index(index);
        if m[axis] + 1 < self.resolution {
            m[axis] += 1;
        } else if self.periodic[axis] {
            m[axis] = 0;
        } else {
            return None;
        }
        Some(self.flat_index(&m))
    }

    /// Whether two samples are within one grid step on every axis.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        let ma = self.multi_index(a);
        let mb = self.multi_index(b);
        ma.iter().zip(&mb).zip(&self.periodic).all(|((&i, &j), &per)| {
            let d = i.abs_diff(j);
            let d = if per { d.min(self.resolution - d) } else { d };
            d <= 1
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOptions {
    /// Capture radius `h`, in chart coordinates.
    pub capture_radius: f64,
    pub horizon: f64,
    pub tol: f64,
}

#[derive(Debug, Clone)]
struct StoredPoint {
    ray: usize,
    t: f64,
    action: f64,
    x: DVector<f64>,
    p: DVector<f64>,
    v: DVector<f64>,
    next: Option<usize>,
}

#[derive(Debug, Clone)]
struct FieldRay {
    sample: usize,
    prop: Propagation,
    /// Times of the resampled points, increasing.
    times: Vec<f64>,
}

/// A ray's state at one time, in the query chart.
#[derive(Debug, Clone, PartialEq)]
pub struct RayState {
    pub chart: usize,
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub v: DVector<f64>,
    pub action: f64,
}

/// Contribution of one ray to a field query.
#[derive(Debug, Clone, PartialEq)]
pub struct RayPass {
    /// Source sample index of the ray.
    pub sample: usize,
    /// Smallest stored action of the ray within the capture radius.
    pub action: f64,
    /// First-order estimate `A(w) + ⟨p(w), y − w⟩` at the closest point `w`
    /// of the ray's polyline.
    pub estimate: f64,
    pub distance: f64,
    pub time: f64,
    pub velocity: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldQuery {
    pub value: f64,
    pub correction: f64,
    pub lipschitz: f64,
    pub argmin: usize,
    /// Best action of any other ray minus `value`.
    pub second_gap: Option<f64>,
    /// Samples whose rays pass within the capture radius, in ray order.
    pub rays: Vec<usize>,
    pub passes: Vec<RayPass>,
}

#[derive(Debug, Clone, Copy)]
enum PassFilter {
    All,
    Only(usize),
    Nothing,
}

/// Minimal stored action over characteristics passing near a point.
///
/// With an inversion atlas, points are stored in each chart where their
/// coordinates have norm below 2, and queries are answered in the chart
/// where the query point has norm at most 1.
#[derive(Debug, Clone)]
pub struct ValueField {
    h: f64,
    horizon: f64,
    two_charts: bool,
    layout: MeshLayout,
    rays: Vec<FieldRay>,
    points: Vec<StoredPoint>,
    cells: HashMap<(usize, [i64; 3]), Vec<usize>>,
    by_sample: HashMap<usize, usize>,
    max_gap: f64,
}

fn to_chart(from: usize, to: usize, x: &DVector<f64>, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if from == to {
        (x.clone(), p.clone())
    } else {
        atlas::lift(x, p)
    }
}

fn position_to_chart(from: usize, to: usize, x: &DVector<f64>) -> DVector<f64> {
    if from == to {
        x.clone()
    } else {
        atlas::invert(x)
    }
}

/// Charts in which a point given in `chart` is stored.
fn storage_charts(two_charts: bool, chart: usize, x: &DVector<f64>) -> Vec<usize> {
    if !two_charts {
        return vec![chart];
    }
    let r = x.norm();
    let mut out = Vec::with_capacity(2);
    for c in [0, 1] {
        let keep = if c == chart { r < 2.0 } else { r > 0.5 };
        if keep {
            out.push(c);
        }
    }
    out
}

fn query_chart(two_charts: bool, chart: usize, x: &DVector<f64>) -> usize {
    if two_charts && x.norm() > 1.0 {
        1 - chart
    } else {
        chart
    }
}

fn cell_of(x: &DVector<f64>, h: f64) -> [i64; 3] {
    let mut c = [0i64; 3];
    for (i, v) in x.iter().enumerate().take(3) {
        c[i] = (v / h).floor() as i64;
    }
    c
}

struct Resampled {
    t: f64,
    chart: usize,
    x: DVector<f64>,
    p: DVector<f64>,
    action: f64,
}

fn resample_ray(prop: &Propagation, spacing: f64) -> Vec<Resampled> {
    let n = prop.n;
    let mut out = Vec::new();
    let mut push = |t: f64, chart: usize, y: &[f64]| {
        if y.iter().all(|v| v.is_finite()) {
            out.push(Resampled {
                t,
                chart,
                x: DVector::from_row_slice(&y[..n]),
                p: DVector::from_row_slice(&y[n..2 * n]),
                action: y[2 * n],
            });
        }
    };
    push(0.0, prop.grid_charts[0], &prop.solution.y[0]);
    for (i, step) in prop.solution.steps.iter().enumerate() {
        let chart = prop.step_charts[i];
        let mut length = 0.0;
        let mut prev = DVector::from_row_slice(&step.eval(step.t0)[..n]);
        for j in 1..=4 {
            let y = step.eval(step.t0 + step.h * j as f64 / 4.0);
            let x = DVector::from_row_slice(&y[..n]);
            length += (&x - &prev).norm();
            prev = x;
        }
        let m = ((length / spacing).ceil() as usize).max(1);
        for j in 1..=m {
            let t = step.t0 + step.h * j as f64 / m as f64;
            push(t, chart, &step.eval(t));
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Segment parameter and distance of the point of `[a, b]` closest to `y`.
fn closest_on_segment(y: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut len2 = 0.0;
    let mut dot = 0.0;
    for i in 0..y.len() {
        let d = b[i] - a[i];
        len2 += d * d;
        dot += (y[i] - a[i]) * d;
    }
    let lambda = if len2 > 0.0 { (dot / len2).clamp(0.0, 1.0) } else { 0.0 };
    let mut r2 = 0.0;
    for i in 0..y.len() {
        let w = a[i] + lambda * (b[i] - a[i]);
        r2 += (y[i] - w) * (y[i] - w);
    }
    (lambda, r2.sqrt())
}

impl ValueField {
    pub fn capture_radius(&self) -> f64 {
        self.h
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn ray_count(&self) -> usize {
        self.rays.len()
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// Widest gap between endpoints of adjacent rays.
    pub fn max_gap(&self) -> f64 {
        self.max_gap
    }

    pub fn layout(&self) -> &MeshLayout {
        &self.layout
    }

    pub fn contains_sample(&self, sample: usize) -> bool {
        self.by_sample.contains_key(&sample)
    }

    /// Resampled times of a sample's ray (chart spacing at most `h/4`).
    pub fn ray_times(&self, sample: usize) -> Option<&[f64]> {
        self.by_sample.get(&sample).map(|&r| self.rays[r].times.as_slice())
    }

    /// State of a sample's ray at `t`, moved to the query chart.
    pub fn ray_state(&self, model: &HamiltonianModel, sample: usize, t: f64) -> Option<RayState> {
        let ray = &self.rays[*self.by_sample.get(&sample)?];
        let (y, chart) = ray.prop.eval(t)?;
        let n = ray.prop.n;
        let x = DVector::from_row_slice(&y[..n]);
        let p = DVector::from_row_slice(&y[n..2 * n]);
        let qc = query_chart(self.two_charts, chart, &x);
        let (x, p) = to_chart(chart, qc, &x, &p);
        let v = model.chart(qc).grad_p(&x, &p);
        Some(RayState {
            chart: qc,
            x,
            p,
            v,
            action: y[2 * n],
        })
    }

    /// Field value near `x` (given in `chart`).
    pub fn query(&self, chart: usize, x: &DVector<f64>) -> Option<FieldQuery> {
        self.query_with(chart, x, PassFilter::All)
    }

    fn query_with(&self, chart: usize, x: &DVector<f64>, filter: PassFilter) -> Option<FieldQuery> {
        let qc = query_chart(self.two_charts, chart, x);
        let y = position_to_chart(chart, qc, x);
        let h = self.h;
        let center = cell_of(&y, h);
        let dim = y.len().min(3);
        let mut lip = 0.0_f64;
        // (ray, action) within h, and (ray, point) within 2h for passes.
        let mut near: Vec<(usize, f64)> = Vec::new();
        let mut wide: Vec<(usize, usize)> = Vec::new();
        let wanted = |ray: usize| match filter {
            PassFilter::All => true,
            PassFilter::Only(sample) => self.rays[ray].sample == sample,
            PassFilter::Nothing => false,
        };
        let reach = 2i64;
        let span = (2 * reach + 1) as usize;
        for code in 0..span.pow(dim as u32) {
            let mut key = center;
            let mut rem = code;
            for k in key.iter_mut().take(dim) {
                *k += (rem % span) as i64 - reach;
                rem /= span;
            }
            let Some(list) = self.cells.get(&(qc, key)) else {
                continue;
            };
            for &i in list {
                let pt = &self.points[i];
                let d = dist(pt.x.as_slice(), y.as_slice());
                if d <= 2.0 * h {
                    lip = lip.max(pt.p.norm());
                    if wanted(pt.ray) {
                        wide.push((pt.ray, i));
                    }
                    if d <= h {
                        near.push((pt.ray, pt.action));
                    }
                }
            }
        }
        if near.is_empty() {
            return None;
        }
        near.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        near.dedup_by_key(|e| e.0);
        let (argmin_ray, value) = near
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("at least one ray");
        let second = near.iter().filter(|e| e.0 != argmin_ray).map(|e| e.1).min_by(f64::total_cmp);
        wide.sort_unstable();
        let mut passes = Vec::new();
        for group in wide.chunk_by(|a, b| a.0 == b.0) {
            let r = group[0].0;
            let Ok(slot) = near.binary_search_by_key(&r, |e| e.0) else {
                continue;
            };
            // Closest point on the ray's polyline among segments touching
            // stored points within 2h.
            let mut best: Option<(f64, usize, f64)> = None;
            for &(_, i) in group {
                if let Some(j) = self.points[i].next {
                    let (lambda, d) = closest_on_segment(y.as_slice(), self.points[i].x.as_slice(), self.points[j].x.as_slice());
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, i, lambda));
                    }
                }
                let d = dist(y.as_slice(), self.points[i].x.as_slice());
                if best.is_none_or(|b| d < b.0) {
                    best = Some((d, i, 0.0));
                }
            }
            let (distance, i, lambda) = best.expect("ray has a point within h");
            let a = &self.points[i];
            let (action, p, w, t, v) = match a.next {
                Some(j) if lambda > 0.0 => {
                    let b = &self.points[j];
                    (
                        a.action + lambda * (b.action - a.action),
                        &a.p + (&b.p - &a.p) * lambda,
                        &a.x + (&b.x - &a.x) * lambda,
                        a.t + lambda * (b.t - a.t),
                        &a.v + (&b.v - &a.v) * lambda,
                    )
                }
                _ => (a.action, a.p.clone(), a.x.clone(), a.t, a.v.clone()),
            };
            passes.push(RayPass {
                sample: self.rays[r].sample,
                action: near[slot].1,
                estimate: action + p.dot(&(&y - &w)),
                distance,
                time: t,
                velocity: v,
            });
        }
        Some(FieldQuery {
            value,
            correction: lip * h,
            lipschitz: lip,
            argmin: self.rays[argmin_ray].sample,
            second_gap: second.map(|s| s - value),
            rays: near.iter().map(|e| self.rays[e.0].sample).collect(),
            passes,
        })
    }
}

/// Integrates every sample's characteristic to `opts.horizon` and stores
/// the family for value queries.
pub fn build_value_field(
    model: &HamiltonianModel,
    samples: &[SourceSample],
    layout: &MeshLayout,
    opts: &FieldOptions,
) -> Result<ValueField> {
    let h = opts.capture_radius;
    if !(h > 0.0 && opts.horizon > 0.0 && opts.tol > 0.0) {
        return Err(Error::InvalidInput("capture radius, horizon and tolerance must be positive".into()));
    }
    if model.dim() > 3 {
        return Err(Error::Unsupported("value fields are implemented for n ≤ 3".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("value field needs at least one sample".into()));
    }
    let two_charts = model.chart_count() > 1;
    let traced: Vec<(FieldRay, Vec<Resampled>)> = samples
        .par_iter()
        .map(|s| {
            let prop = Propagation::run(model, s.chart, &s.start(), None, 0.0, opts.horizon, opts.tol);
            let pts = resample_ray(&prop, 0.25 * h);
            let times = pts.iter().map(|p| p.t).collect();
            (
                FieldRay {
                    sample: s.index,
                    prop,
                    times,
                },
                pts,
            )
        })
        .collect();

    let mut field = ValueField {
        h,
        horizon: opts.horizon,
        two_charts,
        layout: layout.clone(),
        rays: Vec::with_capacity(traced.len()),
        points: Vec::new(),
        cells: HashMap::new(),
        by_sample: HashMap::new(),
        max_gap: 0.0,
    };
    for (r, (ray, pts)) in traced.into_iter().enumerate() {
        field.by_sample.insert(ray.sample, r);
        let mut last: [Option<usize>; 2] = [None, None];
        for pt in pts {
            let charts = storage_charts(two_charts, pt.chart, &pt.x);
            let mut stored = [false; 2];
            for c in charts {
                let (x, p) = to_chart(pt.chart, c, &pt.x, &pt.p);
                if !(x.iter().chain(p.iter()).all(|v| v.is_finite())) {
                    continue;
                }
                let v = model.chart(c).grad_p(&x, &p);
                let idx = field.points.len();
                if let Some(prev) = last[c] {
                    field.points[prev].next = Some(idx);
                }
                field.cells.entry((c, cell_of(&x, h))).or_default().push(idx);
                field.points.push(StoredPoint {
                    ray: r,
                    t: pt.t,
                    action: pt.action,
                    x,
                    p,
                    v,
                    next: None,
                });
                last[c] = Some(idx);
                stored[c] = true;
            }
            for c in 0..2 {
                if !stored[c] {
                    last[c] = None;
                }
            }
        }
        field.rays.push(ray);
    }

    // Density: adjacent rays must end within h of each other.
    let mut worst = (0.0_f64, 0usize, 0usize);
    for s in samples {
        for axis in 0..layout.periodic.len() {
            let Some(other) = layout.forward(s.index, axis) else {
                continue;
            };
            let (Some(&ra), Some(&rb)) = (field.by_sample.get(&s.index), field.by_sample.get(&other)) else {
                continue;
            };
            let t = field.rays[ra].prop.t_last().min(field.rays[rb].prop.t_last());
            let (Some((ya, ca)), Some((yb, cb))) = (field.rays[ra].prop.eval(t), field.rays[rb].prop.eval(t)) else {
                continue;
            };
            let n = model.dim();
            let xa = DVector::from_row_slice(&ya[..n]);
            let xb = position_to_chart(cb, ca, &DVector::from_row_slice(&yb[..n]));
            let gap = (xa - xb).norm();
            if gap > worst.0 {
                worst = (gap, s.index, other);
            }
        }
    }
    field.max_gap = worst.0;
    if worst.0 >= h {
        return Err(Error::InsufficientDensity {
            gap: worst.0,
            ray_a: worst.1,
            ray_b: worst.2,
            radius: h,
        });
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutOptions {
    /// Margin above the field correction for declaring lost minimality.
    pub band_tol: f64,
    pub refine_tol: f64,
    pub time_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutStatus {
    Cut,
    NoneUpTo,
    UndeterminedBeyond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutResult {
    pub status: CutStatus,
    /// Cut time after clamping to the conjugate time.
    pub t_cut: Option<f64>,
    /// Refined crossing before clamping.
    pub t_raw: Option<f64>,
    /// First time the along-ray action left the band `V + correction + tol`.
    pub band_time: Option<f64>,
    /// Horizon for `NoneUpTo`, last decided time for `UndeterminedBeyond`.
    pub decided_to: f64,
    /// Ray whose first-order estimate located the crossing.
    pub competitor: Option<usize>,
    pub correction: f64,
    /// Raw crossing later than `t_conj + time_tol`.
    pub violation: bool,
    /// The competitor could not be followed back, so the band time was kept.
    pub fallback: bool,
}

/// Along-ray action minus a ray's first-order estimate at the ray's position.
fn competitor_gap(field: &ValueField, model: &HamiltonianModel, sample: usize, competitor: usize, t: f64) -> Option<f64> {
    let st = field.ray_state(model, sample, t)?;
    let q = field.query_with(st.chart, &st.x, PassFilter::Only(competitor))?;
    let pass = q.passes.first()?;
    Some(st.action - pass.estimate)
}

/// Last time the sample's characteristic stays action-minimizing.
pub fn cut_time(
    model: &HamiltonianModel,
    sample: &SourceSample,
    field: &ValueField,
    horizon: f64,
    t_conj: Option<f64>,
    opts: &CutOptions,
) -> Result<CutResult> {
    let Some(times) = field.ray_times(sample.index) else {
        return Err(Error::InvalidInput(format!("sample {} is not in the field's family", sample.index)));
    };
    if horizon > field.horizon() + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "cut horizon {horizon} exceeds the field horizon {}",
            field.horizon()
        )));
    }
    let id = sample.index;
    let band = |t: f64| -> Option<(bool, f64, bool)> {
        let st = field.ray_state(model, id, t)?;
        let q = field.query_with(st.chart, &st.x, PassFilter::Nothing)?;
        let covered = q.rays.iter().any(|&r| r != id);
        Some((st.action - q.value - q.correction > opts.band_tol, q.correction, covered))
    };
    let mut grid: Vec<f64> = times.iter().copied().filter(|&t| t > 0.0 && t < horizon).collect();
    grid.push(horizon);
    let mut prev = 0.0;
    let mut max_corr = 0.0_f64;
    let mut hit = None;
    for &t in &grid {
        let Some((outside, corr, covered)) = band(t) else {
            return Ok(undetermined(prev, max_corr));
        };
        if !covered {
            return Ok(undetermined(prev, max_corr));
        }
        max_corr = max_corr.max(corr);
        if outside {
            hit = Some((prev, t));
            break;
        }
        prev = t;
    }
    let Some((mut lo, mut hi)) = hit else {
        return Ok(CutResult {
            status: CutStatus::NoneUpTo,
            t_cut: None,
            t_raw: None,
            band_time: None,
            decided_to: horizon,
            competitor: None,
            correction: max_corr,
            violation: false,
            fallback: false,
        });
    };
    let step = hi - lo;
    while hi - lo > opts.refine_tol {
        let mid = 0.5 * (lo + hi);
        match band(mid) {
            Some((true, _, _)) => hi = mid,
            _ => lo = mid,
        }
    }
    let t_b = hi;

    // Competitor with the largest first-order action deficit at the band time.
    let st = field.ray_state(model, id, t_b).expect("band time lies on the ray");
    let q = field.query(st.chart, &st.x).expect("band time is covered");
    let best = q
        .passes
        .iter()
        .filter(|p| p.sample != id)
        .map(|p| (p.sample, st.action - p.estimate))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    let mut fallback = false;
    let mut competitor = None;
    let raw = match best {
        Some((j, d)) if d > 0.0 => {
            competitor = Some(j);
            let mut hi = t_b;
            let mut t = t_b - step;
            let lo = loop {
                if t <= 0.0 {
                    break 0.0;
                }
                match competitor_gap(field, model, id, j, t) {
                    Some(d) if d > 0.0 => {
                        hi = t;
                        t -= step;
                    }
                    Some(_) => break t,
                    None => {
                        fallback = true;
                        break t;
                    }
                }
            };
            let mut lo = lo;
            while hi - lo > opts.refine_tol {
                let mid = 0.5 * (lo + hi);
                match competitor_gap(field, model, id, j, mid) {
                    Some(d) if d > 0.0 => hi = mid,
                    _ => lo = mid,
                }
            }
            0.5 * (lo + hi)
        }
        _ => {
            fallback = true;
            t_b
        }
    };
    let violation = t_conj.is_some_and(|tc| raw > tc + opts.time_tol);
    let t_cut = match t_conj {
        Some(tc) => raw.min(tc),
        None => raw,
    };
    Ok(CutResult {
        status: CutStatus::Cut,
        t_cut: Some(t_cut),
        t_raw: Some(raw),
        band_time: Some(t_b),
        decided_to: t_b,
        competitor,
        correction: q.correction,
        violation,
        fallback,
    })
}

fn undetermined(t: f64, corr: f64) -> CutResult {
    CutResult {
        status: CutStatus::UndeterminedBeyond,
        t_cut: None,
        t_raw: None,
        band_time: None,
        decided_to: t,
        competitor: None,
        correction: corr,
        violation: false,
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutClass {
    SigmaPoint,
    GammaPoint,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: CutClass,
    /// `|t_cut − t_conj| ≤ time_tol`.
    pub gamma_flag: bool,
    /// Competing ray with the widest arrival angle, if any.
    pub competitor: Option<usize>,
    pub angle: Option<f64>,
}

/// Labels a cut point from its times and any competing minimizer.
///
/// `competitor` is `(ray, angle)` of the best non-adjacent ray attaining the
/// field minimum; competitor evidence takes precedence over `gamma_flag`.
pub fn classify(
    t_cut: f64,
    t_conj: Option<f64>,
    competitor: Option<(usize, f64)>,
    angle_tol: f64,
    time_tol: f64,
) -> Classification {
    let gamma_flag = t_conj.is_some_and(|tc| (t_cut - tc).abs() <= time_tol);
    let sigma = competitor.filter(|&(_, a)| a > angle_tol);
    let class = if sigma.is_some() {
        CutClass::SigmaPoint
    } else if gamma_flag {
        CutClass::GammaPoint
    } else {
        CutClass::Undetermined
    };
    Classification {
        class,
        gamma_flag,
        competitor: competitor.map(|c| c.0),
        angle: competitor.map(|c| c.1),
    }
}

/// Non-adjacent rays reaching `exp(x, t_cut)` within the field band, with the
/// widest angle between arrival velocities.
pub fn cut_competitor(
    model: &HamiltonianModel,
    field: &ValueField,
    sample: usize,
    t_cut: f64,
    band_tol: f64,
) -> Option<(usize, f64)> {
    let st = field.ray_state(model, sample, t_cut)?;
    let q = field.query(st.chart, &st.x)?;
    let level = q.value + q.correction + band_tol;
    q.passes
        .iter()
        .filter(|p| p.sample != sample && !field.layout().adjacent(p.sample, sample) && p.action <= level)
        .map(|p| {
            let c = st.v.dot(&p.velocity) / (st.v.norm() * p.velocity.norm());
            (p.sample, c.clamp(-1.0, 1.0).acos())
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
}

/// Tolerances of a loci scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub conjugate: ConjugateOptions,
    /// Capture radius and horizon of the value field; `None` skips cut times.
    pub field: Option<FieldOptions>,
    pub band_tol: f64,
    pub angle_tol: f64,
    pub time_tol: f64,
    pub classify: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LociRecord {
    pub sample: usize,
    pub parameter: Vec<f64>,
    pub t_conj: Option<f64>,
    pub multiplicity: usize,
    pub conj_s_min: Option<f64>,
    pub det_sign_change: Option<bool>,
    pub detector2: Option<f64>,
    pub k_dot_min_eig: Option<f64>,
    pub searched_to: Option<f64>,
    pub t_cut: Option<f64>,
    pub t_cut_raw: Option<f64>,
    pub cut_status: Option<CutStatus>,
    pub cut_decided_to: Option<f64>,
    pub correction: Option<f64>,
    pub class: Option<CutClass>,
    pub gamma_flag: bool,
    pub competitor: Option<usize>,
    pub competitor_angle: Option<f64>,
    pub ordering_violation: bool,
    pub error: Option<String>,
}

impl LociRecord {
    fn empty(sample: usize, parameter: Vec<f64>) -> Self {
        Self {
            sample,
            parameter,
            t_conj: None,
            multiplicity: 0,
            conj_s_min: None,
            det_sign_change: None,
            detector2: None,
            k_dot_min_eig: None,
            searched_to: None,
            t_cut: None,
            t_cut_raw: None,
            cut_status: None,
            cut_decided_to: None,
            correction: None,
            class: None,
            gamma_flag: false,
            competitor: None,
            competitor_angle: None,
            ordering_violation: false,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub rays: usize,
    pub points: usize,
    pub capture_radius: f64,
    pub horizon: f64,
    pub max_adjacent_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LociTable {
    pub horizon: f64,
    pub options: ScanOptions,
    pub field: Option<FieldSummary>,
    pub records: Vec<LociRecord>,
}

impl LociTable {
    /// Rows with `t_cut_raw > t_conj + time_tol`.
    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| r.ordering_violation).count()
    }
}

/// Conjugate times, cut times and classes for every sample of a source mesh.
pub fn scan_loci(
    model: &HamiltonianModel,
    source: &SourceSpec,
    resolution: usize,
    horizon: f64,
    opts: &ScanOptions,
) -> Result<LociTable> {
    let mesh = source_mesh(model, source, resolution)?;
    let layout = MeshLayout::of(source, model.dim(), resolution);
    let mut records: Vec<LociRecord> = mesh
        .par_iter()
        .map(|entry| {
            let mut rec = LociRecord::empty(entry.index, entry.parameter.clone());
            match &entry.sample {
                Err(e) => rec.error = Some(e.clone()),
                Ok(s) => match conjugate_time(model, s, horizon, &opts.conjugate) {
                    Ok(c) => {
                        rec.t_conj = c.t_conj;
                        rec.multiplicity = c.multiplicity;
                        rec.conj_s_min = c.s_min;
                        rec.det_sign_change = c.det_sign_change;
                        rec.detector2 = c.detector2;
                        rec.k_dot_min_eig = c.k_dot_min_eig;
                        rec.searched_to = Some(c.searched_to);
                    }
                    Err(e) => rec.error = Some(e.to_string()),
                },
            }
            rec
        })
        .collect();

    let mut summary = None;
    if let Some(fopts) = &opts.field {
        let samples: Vec<SourceSample> = mesh.iter().filter_map(|e| e.sample.as_ref().ok().cloned()).collect();
        let field = build_value_field(model, &samples, &layout, fopts)?;
        summary = Some(FieldSummary {
            rays: field.ray_count(),
            points: field.point_count(),
            capture_radius: field.capture_radius(),
            horizon: field.horizon(),
            max_adjacent_gap: field.max_gap(),
        });
        let cut_opts = CutOptions {
            band_tol: opts.band_tol,
            refine_tol: opts.conjugate.refine_tol,
            time_tol: opts.time_tol,
        };
        let cut_horizon = horizon.min(fopts.horizon);
        records.par_iter_mut().zip(mesh.par_iter()).for_each(|(rec, entry)| {
            let Ok(s) = &entry.sample else {
                return;
            };
            if rec.error.is_some() {
                return;
            }
            match cut_time(model, s, &field, cut_horizon, rec.t_conj, &cut_opts) {
                Ok(c) => {
                    rec.t_cut = c.t_cut;
                    rec.t_cut_raw = c.t_raw;
                    rec.cut_status = Some(c.status);
                    rec.cut_decided_to = Some(c.decided_to);
                    rec.correction = Some(c.correction);
                    rec.ordering_violation = c.violation;
                    if opts.classify {
                        if let Some(tc) = c.t_cut {
                            let comp = cut_competitor(model, &field, s.index, tc, opts.band_tol);
                            let cls = classify(tc, rec.t_conj, comp, opts.angle_tol, opts.time_tol);
                            rec.class = Some(cls.class);
                            rec.gamma_flag = cls.gamma_flag;
                            rec.competitor = cls.competitor;
                            rec.competitor_angle = cls.angle;
                        }
                    }
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
        });
    }
    Ok(LociTable {
        horizon,
        options: *opts,
        field: summary,
        records,
    })
}
