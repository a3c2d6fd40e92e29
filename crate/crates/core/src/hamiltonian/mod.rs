//! Hamiltonian models, characteristic flows, Legendre duality and actions.

pub mod atlas;
pub mod catalog;
mod propagate;
mod validate;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::DenseStep;

pub use atlas::InversionAtlas;
pub use propagate::{PhaseSystem, Propagation};
pub use validate::{validate_model, HypothesisCheck, SampleIssue, ValidationReport};

/// Evaluators of a Hamiltonian `H(x, p)` in one chart.
///
/// Implementations must be safe for concurrent read-only use.
pub trait Hamiltonian: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64;
    fn grad_x(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;
    fn grad_p(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64>;

    /// Analytic second derivatives, when the model has them.
    fn hessians(&self, _x: &DVector<f64>, _p: &DVector<f64>) -> Option<Hessians> {
        None
    }
}

/// The blocks `A = ∂²H/∂x²`, `B = ∂²H/∂x∂p` (row index on `x`) and
/// `Q = ∂²H/∂p²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hessians {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondDerivatives {
    Analytic,
    FiniteDifference,
}

/// Coefficient matrices after symmetrization, with the removed asymmetry.
#[derive(Debug, Clone)]
pub struct CoeffMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub a_asymmetry: f64,
    pub q_asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

impl PhasePoint {
    pub fn new(x: DVector<f64>, p: DVector<f64>) -> Self {
        assert_eq!(x.len(), p.len(), "position and covector dimensions differ");
        Self { x, p }
    }

    pub fn from_slices(x: &[f64], p: &[f64]) -> Self {
        Self::new(DVector::from_row_slice(x), DVector::from_row_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// A Hamiltonian with its level set, chart atlas and derivative provenance.
#[derive(Clone)]
pub struct HamiltonianModel {
    name: String,
    charts: Vec<Arc<dyn Hamiltonian>>,
    atlas: Option<InversionAtlas>,
    level: f64,
    second_derivatives: SecondDerivatives,
    /// User-declared smoothness class such as `C^{3,1}`; never verified.
    pub smoothness: Option<String>,
}

impl fmt::Debug for HamiltonianModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianModel")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("level", &self.level)
            .field("atlas", &self.atlas)
            .field("second_derivatives", &self.second_derivatives)
            .finish()
    }
}

impl HamiltonianModel {
    pub fn new(name: impl Into<String>, hamiltonian: Arc<dyn Hamiltonian>, level: f64) -> Self {
        let analytic = {
            let n = hamiltonian.dim();
            let z = DVector::zeros(n);
            hamiltonian.hessians(&z, &z).is_some()
        };
        Self {
            name: name.into(),
            charts: vec![hamiltonian],
            atlas: None,
            level,
            second_derivatives: if analytic {
                SecondDerivatives::Analytic
            } else {
                SecondDerivatives::FiniteDifference
            },
            smoothness: None,
        }
    }

    /// Adds a second chart related to the first by inversion.
    pub fn with_inversion_chart(mut self, alternate: Arc<dyn Hamiltonian>, atlas: InversionAtlas) -> Self {
        assert_eq!(alternate.dim(), self.dim());
        self.charts.truncate(1);
        self.charts.push(alternate);
        self.atlas = Some(atlas);
        self
    }

    /// Forces finite-difference second derivatives even when analytic ones exist.
    pub fn with_finite_difference_hessians(mut self) -> Self {
        self.second_derivatives = SecondDerivatives::FiniteDifference;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.charts[0].dim()
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// Dirichlet mode is the `H = 0` convention; any other level is eikonal-style.
    pub fn is_dirichlet(&self) -> bool {
        self.level == 0.0
    }

    pub fn atlas(&self) -> Option<&InversionAtlas> {
        self.atlas.as_ref()
    }

    pub fn chart_count(&self) -> usize {
        self.charts.len()
    }

    pub fn second_derivatives(&self) -> SecondDerivatives {
        self.second_derivatives
    }

    pub fn chart(&self, chart: usize) -> &dyn Hamiltonian {
        self.charts[chart].as_ref()
    }

    pub fn value(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        self.charts[0].value(x, p)
    }

    pub fn grad_x(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        self.charts[0].grad_x(x, p)
    }

    pub fn grad_p(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        self.charts[0].grad_p(x, p)
    }

    /// Second derivatives in `chart`: analytic when recorded as such,
    /// otherwise central differences of the gradients with step
    /// `cbrt(eps)·(1 + |state|)`.
    pub fn hessians_in(&self, chart: usize, x: &DVector<f64>, p: &DVector<f64>) -> Hessians {
        let h = self.charts[chart].as_ref();
        if self.second_derivatives == SecondDerivatives::Analytic {
            if let Some(hs) = h.hessians(x, p) {
                return hs;
            }
        }
        fd_hessians(h, x, p)
    }

    pub fn hessians(&self, x: &DVector<f64>, p: &DVector<f64>) -> Hessians {
        self.hessians_in(0, x, p)
    }

    /// Lagrangian integrand `⟨p, ∂H/∂p⟩ − H + level` in `chart`.
    pub fn lagrangian_along(&self, chart: usize, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let h = self.charts[chart].as_ref();
        p.dot(&h.grad_p(x, p)) - h.value(x, p) + self.level
    }

    /// Maps a phase point from `chart` to the primary chart.
    pub fn to_primary(&self, chart: usize, x: &DVector<f64>, p: &DVector<f64>) -> PhasePoint {
        if chart == 0 {
            PhasePoint::new(x.clone(), p.clone())
        } else {
            let (y, q) = atlas::lift(x, p);
            PhasePoint::new(y, q)
        }
    }

    pub fn position_to_primary(&self, chart: usize, x: &DVector<f64>) -> DVector<f64> {
        if chart == 0 {
            x.clone()
        } else {
            atlas::invert(x)
        }
    }

    /// Maps a tangent vector `(h, v)` at `(x, p)` from `chart` to the primary chart.
    pub fn tangent_to_primary(
        &self,
        chart: usize,
        x: &DVector<f64>,
        p: &DVector<f64>,
        h: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        if chart == 0 {
            (h.clone(), v.clone())
        } else {
            atlas::lift_tangent(x, p, h, v)
        }
    }
}

fn fd_step(x: &DVector<f64>, p: &DVector<f64>) -> f64 {
    let scale = (x.norm_squared() + p.norm_squared()).sqrt();
    f64::EPSILON.cbrt() * (1.0 + scale)
}

fn fd_hessians(h: &dyn Hamiltonian, x: &DVector<f64>, p: &DVector<f64>) -> Hessians {
    let n = x.len();
    let step = fd_step(x, p);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut q = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (h.grad_x(&xp, p) - h.grad_x(&xm, p)) / (2.0 * step);
        a.set_column(j, &col);

        let mut pp = p.clone();
        let mut pm = p.clone();
        pp[j] += step;
        pm[j] -= step;
        let colb = (h.grad_x(x, &pp) - h.grad_x(x, &pm)) / (2.0 * step);
        b.set_column(j, &colb);
        let colq = (h.grad_p(x, &pp) - h.grad_p(x, &pm)) / (2.0 * step);
        q.set_column(j, &colq);
    }
    Hessians { a, b, q }
}

fn symmetrize(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let residual = (m - m.transpose()).abs().max() * 0.5;
    (sym, residual)
}

/// Coefficient matrices of the linearized system at a phase point.
pub fn coeff_matrices(model: &HamiltonianModel, at: &PhasePoint) -> Result<CoeffMatrices> {
    coeff_matrices_in(model, 0, at)
}

pub fn coeff_matrices_in(model: &HamiltonianModel, chart: usize, at: &PhasePoint) -> Result<CoeffMatrices> {
    let hs = model.hessians_in(chart, &at.x, &at.p);
    if hs.a.iter().chain(hs.b.iter()).chain(hs.q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coefficient matrices".into()));
    }
    let (a, a_asymmetry) = symmetrize(&hs.a);
    let (q, q_asymmetry) = symmetrize(&hs.q);
    Ok(CoeffMatrices {
        a,
        b: hs.b,
        q,
        a_asymmetry,
        q_asymmetry,
    })
}

/// A sampled characteristic curve with cumulative action and dense output.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// States in the chart recorded in `charts`.
    pub states: Vec<PhasePoint>,
    pub charts: Vec<usize>,
    pub actions: Vec<f64>,
    /// `max |H − level|` over the stored states.
    pub energy_drift: f64,
    /// Set when the flow stopped before the requested end time.
    pub escaped_at: Option<f64>,
    pub tol: f64,
    propagation: Propagation,
}

impl Trajectory {
    pub(crate) fn from_propagation(model: &HamiltonianModel, propagation: Propagation, tol: f64) -> Self {
        let n = model.dim();
        let mut states = Vec::with_capacity(propagation.solution.t.len());
        let mut actions = Vec::with_capacity(states.capacity());
        let mut drift = 0.0_f64;
        for (y, &c) in propagation.solution.y.iter().zip(&propagation.grid_charts) {
            let pt = PhasePoint::from_slices(&y[..n], &y[n..2 * n]);
            drift = drift.max((model.chart(c).value(&pt.x, &pt.p) - model.level()).abs());
            states.push(pt);
            actions.push(y[2 * n]);
        }
        let escaped_at = (!propagation.solution.outcome.is_completed()).then(|| propagation.solution.t_last());
        Self {
            times: propagation.solution.t.clone(),
            charts: propagation.grid_charts.clone(),
            states,
            actions,
            energy_drift: drift,
            escaped_at,
            tol,
            propagation,
        }
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectory holds its start")
    }

    pub fn start(&self) -> &PhasePoint {
        &self.states[0]
    }

    pub fn end(&self) -> &PhasePoint {
        self.states.last().expect("trajectory holds its start")
    }

    pub fn end_chart(&self) -> usize {
        *self.charts.last().expect("trajectory holds its start")
    }

    pub fn dense_steps(&self) -> &[DenseStep] {
        &self.propagation.solution.steps
    }

    pub fn step_charts(&self) -> &[usize] {
        &self.propagation.step_charts
    }

    pub fn propagation(&self) -> &Propagation {
        &self.propagation
    }

    /// Dense-output state, chart and cumulative action at time `t`.
    pub fn state_at(&self, t: f64) -> Option<(PhasePoint, usize, f64)> {
        let (y, chart) = self.propagation.eval(t)?;
        let n = self.states[0].dim();
        Some((PhasePoint::from_slices(&y[..n], &y[n..2 * n]), chart, y[2 * n]))
    }

    /// Position at `t` in the primary chart.
    pub fn primary_position_at(&self, model: &HamiltonianModel, t: f64) -> Option<DVector<f64>> {
        let (pt, chart, _) = self.state_at(t)?;
        Some(model.position_to_primary(chart, &pt.x))
    }
}

/// Integrates the characteristic system from `start` (primary chart) to `t_end`.
///
/// Fails with [`Error::Escaped`] if the flow blows up first.
pub fn flow(model: &HamiltonianModel, start: &PhasePoint, t_end: f64, tol: f64) -> Result<Trajectory> {
    let traj = flow_partial(model, start, t_end, tol)?;
    match traj.escaped_at {
        Some(t_last) => Err(Error::Escaped { t_last }),
        None => Ok(traj),
    }
}

/// Like [`flow`] but returns the valid part of an escaping trajectory.
pub fn flow_partial(model: &HamiltonianModel, start: &PhasePoint, t_end: f64, tol: f64) -> Result<Trajectory> {
    if !start.is_finite() {
        return Err(Error::InvalidInput("start state is not finite".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if start.dim() != model.dim() {
        return Err(Error::InvalidInput("start dimension differs from model".into()));
    }
    let prop = Propagation::run(model, 0, start, None, 0.0, t_end, tol);
    Ok(Trajectory::from_propagation(model, prop, tol))
}

/// Cumulative action of a trajectory by Gauss–Legendre quadrature on its
/// dense output, using `L = ⟨p, ∂H/∂p⟩ − H + level`.
pub fn action(model: &HamiltonianModel, traj: &Trajectory) -> f64 {
    const NODES: [f64; 5] = [
        -0.906_179_845_938_664,
        -0.538_469_310_105_683,
        0.0,
        0.538_469_310_105_683,
        0.906_179_845_938_664,
    ];
    const WEIGHTS: [f64; 5] = [
        0.236_926_885_056_189,
        0.478_628_670_499_366,
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
    ];
    let n = model.dim();
    let mut total = 0.0;
    for (step, &chart) in traj.dense_steps().iter().zip(traj.step_charts()) {
        let half = 0.5 * step.h;
        let mid = step.t0 + half;
        let mut acc = 0.0;
        for (node, w) in NODES.iter().zip(WEIGHTS) {
            let y = step.eval(mid + half * node);
            let x = DVector::from_row_slice(&y[..n]);
            let p = DVector::from_row_slice(&y[n..2 * n]);
            acc += w * model.lagrangian_along(chart, &x, &p);
        }
        total += acc * half;
    }
    total
}

/// Legendre transform `L(x, v) = max_p ⟨p, v⟩ − H(x, p)` by damped Newton.
pub fn legendre(model: &HamiltonianModel, x: &DVector<f64>, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    const MAX_ITER: usize = 100;
    let objective = |p: &DVector<f64>| p.dot(v) - model.value(x, p);
    let mut p = DVector::zeros(x.len());
    let mut residual = (model.grad_p(x, &p) - v).norm();
    for _ in 0..MAX_ITER {
        if residual <= 1e-12 * (1.0 + v.norm()) {
            break;
        }
        let g = v - model.grad_p(x, &p);
        let q = model.hessians(x, &p).q;
        let q = (&q + q.transpose()) * 0.5;
        let dir = match q.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => q.lu().solve(&g).unwrap_or_else(|| g.clone()),
        };
        let f0 = objective(&p);
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let cand = &p + &dir * step;
            let f1 = objective(&cand);
            let r1 = (model.grad_p(x, &cand) - v).norm();
            if f1 >= f0 - 1e-15 * f0.abs() || r1 < residual {
                p = cand;
                residual = r1;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !(residual <= 1e-10) {
        return Err(Error::NewtonDiverged {
            iterations: MAX_ITER,
            residual,
        });
    }
    let value = p.dot(v) - model.value(x, &p);
    Ok((value, p))
}
