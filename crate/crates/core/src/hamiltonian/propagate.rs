//! Joint integration of a characteristic, its action and an optional frame
//! of linearized solutions, with chart transitions handled in the observer.
//!
//! State layout: `[x (n), p (n), action (1), col_0 (2n), col_1 (2n), …]`
//! where each column holds `(h, v)`.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use super::{atlas, HamiltonianModel, PhasePoint};
use crate::ode::{integrate, Dopri5Options, OdeSystem, Outcome, Solution, StepAction};

pub struct PhaseSystem<'a> {
    model: &'a HamiltonianModel,
    chart: Cell<usize>,
    columns: usize,
}

impl<'a> PhaseSystem<'a> {
    pub fn new(model: &'a HamiltonianModel, chart: usize, columns: usize) -> Self {
        Self {
            model,
            chart: Cell::new(chart),
            columns,
        }
    }

    pub fn chart(&self) -> usize {
        self.chart.get()
    }

    fn n(&self) -> usize {
        self.model.dim()
    }
}

impl OdeSystem for PhaseSystem<'_> {
    fn dim(&self) -> usize {
        let n = self.n();
        2 * n + 1 + 2 * n * self.columns
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> bool {
        let n = self.n();
        let h = self.model.chart(self.chart.get());
        let x = DVector::from_row_slice(&y[..n]);
        let p = DVector::from_row_slice(&y[n..2 * n]);
        let hp = h.grad_p(&x, &p);
        let hx = h.grad_x(&x, &p);
        let hv = h.value(&x, &p);
        for i in 0..n {
            dy[i] = hp[i];
            dy[n + i] = -hx[i];
        }
        dy[2 * n] = p.dot(&hp) - hv + self.model.level();
        if self.columns > 0 {
            let hs = self.model.hessians_in(self.chart.get(), &x, &p);
            let a = (&hs.a + hs.a.transpose()) * 0.5;
            let q = (&hs.q + hs.q.transpose()) * 0.5;
            let bt = hs.b.transpose();
            let base = 2 * n + 1;
            for c in 0..self.columns {
                let off = base + c * 2 * n;
                let hh = DVector::from_row_slice(&y[off..off + n]);
                let vv = DVector::from_row_slice(&y[off + n..off + 2 * n]);
                let dh = &bt * &hh + &q * &vv;
                let dv = -(&a * &hh) - &hs.b * &vv;
                dy[off..off + n].copy_from_slice(dh.as_slice());
                dy[off + n..off + 2 * n].copy_from_slice(dv.as_slice());
            }
        }
        dy.iter().all(|v| v.is_finite())
    }
}

/// Raw output of a joint propagation.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub solution: Solution,
    /// Chart in force during each dense step.
    pub step_charts: Vec<usize>,
    /// Chart of each stored grid state.
    pub grid_charts: Vec<usize>,
    pub columns: usize,
    pub n: usize,
}

impl Propagation {
    /// Integrates from `(start, frame)` given in `chart` at time `t0` to `t_end`.
    ///
    /// `frame` is a `2n × m` matrix of tangent columns `(h; v)`.
    pub fn run(
        model: &HamiltonianModel,
        chart: usize,
        start: &PhasePoint,
        frame: Option<&DMatrix<f64>>,
        t0: f64,
        t_end: f64,
        tol: f64,
    ) -> Self {
        Self::run_with_action(model, chart, start, frame, 0.0, t0, t_end, tol)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run_with_action(
        model: &HamiltonianModel,
        chart: usize,
        start: &PhasePoint,
        frame: Option<&DMatrix<f64>>,
        action0: f64,
        t0: f64,
        t_end: f64,
        tol: f64,
    ) -> Self {
        let n = model.dim();
        let columns = frame.map_or(0, |f| f.ncols());
        let sys = PhaseSystem::new(model, chart, columns);
        let mut y0 = Vec::with_capacity(sys.dim());
        y0.extend(start.x.iter());
        y0.extend(start.p.iter());
        y0.push(action0);
        if let Some(f) = frame {
            assert_eq!(f.nrows(), 2 * n, "frame must have 2n rows");
            for c in 0..columns {
                y0.extend(f.column(c).iter());
            }
        }
        let opts = Dopri5Options::with_tol(tol);
        let atlas = model.atlas().copied();
        let mut step_charts = Vec::new();
        let mut grid_charts = vec![chart];
        let solution = integrate(&sys, t0, &y0, t_end, &opts, |_t, y| {
            let current = sys.chart();
            step_charts.push(current);
            let Some(atlas) = atlas else {
                grid_charts.push(current);
                return StepAction::Continue;
            };
            if !atlas.should_leave(&y[..n]) {
                grid_charts.push(current);
                return StepAction::Continue;
            }
            let x = DVector::from_row_slice(&y[..n]);
            let p = DVector::from_row_slice(&y[n..2 * n]);
            let (w, q) = atlas::lift(&x, &p);
            for c in 0..columns {
                let off = 2 * n + 1 + c * 2 * n;
                let hh = DVector::from_row_slice(&y[off..off + n]);
                let vv = DVector::from_row_slice(&y[off + n..off + 2 * n]);
                let (dh, dv) = atlas::lift_tangent(&x, &p, &hh, &vv);
                y[off..off + n].copy_from_slice(dh.as_slice());
                y[off + n..off + 2 * n].copy_from_slice(dv.as_slice());
            }
            y[..n].copy_from_slice(w.as_slice());
            y[n..2 * n].copy_from_slice(q.as_slice());
            let next = 1 - current;
            sys.chart.set(next);
            grid_charts.push(next);
            StepAction::Modified
        });
        // Overflow records a final grid point without calling the observer.
        if matches!(solution.outcome, Outcome::Overflow { .. }) {
            let c = sys.chart();
            step_charts.push(c);
            grid_charts.push(c);
        }
        Self {
            solution,
            step_charts,
            grid_charts,
            columns,
            n,
        }
    }

    pub fn t_last(&self) -> f64 {
        self.solution.t_last()
    }

    pub fn completed(&self) -> bool {
        self.solution.outcome.is_completed()
    }

    /// Dense state and chart at time `t`.
    pub fn eval(&self, t: f64) -> Option<(Vec<f64>, usize)> {
        if self.solution.steps.is_empty() {
            return (t == self.solution.t[0]).then(|| (self.solution.y[0].clone(), self.grid_charts[0]));
        }
        let i = self.solution.step_index(t)?;
        Some((self.solution.steps[i].eval(t), self.step_charts[i]))
    }

    /// Grid state index `i` split into phase point, chart, action and frame.
    pub fn grid_state(&self, i: usize) -> (PhasePoint, usize, f64, DMatrix<f64>) {
        let (pt, action, frame) = self.split(&self.solution.y[i]);
        (pt, self.grid_charts[i], action, frame)
    }

    pub fn split(&self, y: &[f64]) -> (PhasePoint, f64, DMatrix<f64>) {
        let n = self.n;
        let pt = PhasePoint::from_slices(&y[..n], &y[n..2 * n]);
        let frame = DMatrix::from_column_slice(2 * n, self.columns, &y[2 * n + 1..]);
        (pt, y[2 * n], frame)
    }
}
