//! Linearized Hamiltonian flow, Lagrangian frames and their `K` matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hamiltonian::{HamiltonianModel, PhasePoint, Propagation, Trajectory};

/// `σ((h_a, v_a), (h_b, v_b)) = ⟨h_a, v_b⟩ − ⟨v_a, h_b⟩`.
pub fn symplectic_form(h_a: &DVector<f64>, v_a: &DVector<f64>, h_b: &DVector<f64>, v_b: &DVector<f64>) -> f64 {
    h_a.dot(v_b) - v_a.dot(h_b)
}

/// [`symplectic_form`] on stacked `2n` vectors `(h; v)`.
pub fn symplectic_form_stacked(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "tangent vectors differ in dimension");
    assert!(a.len() % 2 == 0, "stacked tangent vectors have even length");
    let n = a.len() / 2;
    (0..n).map(|i| a[i] * b[n + i] - a[n + i] * b[i]).sum()
}

/// Largest `|σ(c_i, c_j)| / (|c_i| |c_j|)` over column pairs.
pub fn isotropy_residual(columns: &DMatrix<f64>) -> f64 {
    let m = columns.ncols();
    let mut worst = 0.0_f64;
    for i in 0..m {
        let a = columns.column(i);
        let na = a.norm();
        for j in i + 1..m {
            let b = columns.column(j);
            let nb = b.norm();
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let s = symplectic_form_stacked(a.as_slice(), b.as_slice());
            worst = worst.max(s.abs() / (na * nb));
        }
    }
    worst
}

/// Columns `(h; v)` spanning an isotropic subspace of phase space.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianFrame {
    pub columns: DMatrix<f64>,
    pub isotropy_residual: f64,
}

impl LagrangianFrame {
    /// Wraps `columns` and records its isotropy residual without checking it.
    pub fn new(columns: DMatrix<f64>) -> Self {
        assert!(columns.nrows() % 2 == 0, "frame needs 2n rows");
        let isotropy_residual = isotropy_residual(&columns);
        Self {
            columns,
            isotropy_residual,
        }
    }

    /// Like [`LagrangianFrame::new`] but fails on rank deficiency or an
    /// isotropy residual above `tol`.
    pub fn certified(columns: DMatrix<f64>, tol: f64) -> Result<Self> {
        let frame = Self::new(columns);
        if frame.isotropy_residual > tol {
            return Err(Error::DegenerateFrame(format!(
                "isotropy residual {:.3e} exceeds {tol:.1e}",
                frame.isotropy_residual
            )));
        }
        let q = frame.orthonormalized();
        let s = q.columns.clone().svd(false, false).singular_values;
        let smallest = s.iter().copied().fold(f64::INFINITY, f64::min);
        if frame.columns.iter().any(|v| !v.is_finite()) || smallest < 1e-8 {
            return Err(Error::DegenerateFrame(format!("frame is rank deficient (σ_min {smallest:.3e})")));
        }
        Ok(frame)
    }

    pub fn vertical(n: usize) -> Self {
        let mut c = DMatrix::zeros(2 * n, n);
        c.view_mut((n, 0), (n, n)).fill_with_identity();
        Self::new(c)
    }

    pub fn horizontal(n: usize) -> Self {
        let mut c = DMatrix::zeros(2 * n, n);
        c.view_mut((0, 0), (n, n)).fill_with_identity();
        Self::new(c)
    }

    /// The graph `{(h, K h)}` of a symmetric matrix.
    pub fn graph(k: &DMatrix<f64>) -> Self {
        let n = k.nrows();
        let mut c = DMatrix::zeros(2 * n, n);
        c.view_mut((0, 0), (n, n)).fill_with_identity();
        c.view_mut((n, 0), (n, n)).copy_from(k);
        Self::new(c)
    }

    pub fn n(&self) -> usize {
        self.columns.nrows() / 2
    }

    pub fn hblock(&self) -> DMatrix<f64> {
        let n = self.n();
        self.columns.rows(0, n).into_owned()
    }

    pub fn vblock(&self) -> DMatrix<f64> {
        let n = self.n();
        self.columns.rows(n, n).into_owned()
    }

    /// Orthonormal basis of the same span (thin QR).
    pub fn orthonormalized(&self) -> Self {
        let q = self.columns.clone().qr().q();
        Self {
            columns: q,
            isotropy_residual: self.isotropy_residual,
        }
    }

    /// Singular values of the position block of the orthonormalized frame, ascending.
    pub fn hblock_singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.orthonormalized().hblock().svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(f64::total_cmp);
        s
    }

    /// Smallest singular value of the orthonormalized position block; zero
    /// exactly when the subspace meets the vertical.
    pub fn s_min(&self) -> f64 {
        self.hblock_singular_values()[0]
    }
}

/// Outcome of [`extract_k`].
#[derive(Debug, Clone, PartialEq)]
pub enum KExtraction {
    Graph { k: DMatrix<f64>, asymmetry: f64 },
    VerticalDegenerate { s_min: f64 },
}

impl KExtraction {
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            KExtraction::Graph { k, .. } => Some(k),
            KExtraction::VerticalDegenerate { .. } => None,
        }
    }
}

/// Default relative singular-value threshold for [`extract_k`].
pub const SVD_TOL: f64 = 1e-9;

/// `K = V H⁻¹` when the position block is invertible relative to
/// `svd_tol · ‖frame‖`.
pub fn extract_k(frame: &LagrangianFrame, svd_tol: f64) -> KExtraction {
    let h = frame.hblock();
    let v = frame.vblock();
    let s = h.clone().svd(false, false).singular_values;
    let s_min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = frame.columns.norm();
    if !(s_min > svd_tol * scale) {
        return KExtraction::VerticalDegenerate { s_min };
    }
    let Some(h_inv) = h.try_inverse() else {
        return KExtraction::VerticalDegenerate { s_min };
    };
    let k = v * h_inv;
    let asymmetry = (&k - k.transpose()).abs().max() * 0.5;
    KExtraction::Graph {
        k: (&k + k.transpose()) * 0.5,
        asymmetry,
    }
}

/// Linearized solutions along a characteristic.
#[derive(Debug, Clone)]
pub struct FrameTrajectory {
    pub times: Vec<f64>,
    /// Frames in the chart recorded in `charts`.
    pub frames: Vec<LagrangianFrame>,
    pub charts: Vec<usize>,
    pub s_min: Vec<f64>,
    pub states: Vec<PhasePoint>,
    /// Set when propagation stopped early.
    pub truncated: Option<String>,
    propagation: Propagation,
}

impl FrameTrajectory {
    fn from_propagation(propagation: Propagation) -> Self {
        let mut frames = Vec::with_capacity(propagation.solution.t.len());
        let mut states = Vec::with_capacity(frames.capacity());
        let mut s_min = Vec::with_capacity(frames.capacity());
        for i in 0..propagation.solution.t.len() {
            let (pt, _, _, cols) = propagation.grid_state(i);
            let f = LagrangianFrame::new(cols);
            s_min.push(f.s_min());
            frames.push(f);
            states.push(pt);
        }
        let truncated = (!propagation.completed())
            .then(|| format!("{:?} at t = {}", propagation.solution.outcome, propagation.t_last()));
        Self {
            times: propagation.solution.t.clone(),
            charts: propagation.grid_charts.clone(),
            frames,
            s_min,
            states,
            truncated,
            propagation,
        }
    }

    pub fn max_isotropy_residual(&self) -> f64 {
        self.frames.iter().map(|f| f.isotropy_residual).fold(0.0, f64::max)
    }

    /// Dense frame and chart at `t`.
    pub fn frame_at(&self, t: f64) -> Option<(LagrangianFrame, usize)> {
        let (y, chart) = self.propagation.eval(t)?;
        let (_, _, cols) = self.propagation.split(&y);
        Some((LagrangianFrame::new(cols), chart))
    }

    pub fn propagation(&self) -> &Propagation {
        &self.propagation
    }
}

/// Propagates `frame0` along `traj` (jointly re-integrating the characteristic).
pub fn linearized_flow(model: &HamiltonianModel, traj: &Trajectory, frame0: &LagrangianFrame) -> FrameTrajectory {
    let prop = Propagation::run(
        model,
        traj.charts[0],
        traj.start(),
        Some(&frame0.columns),
        0.0,
        traj.t_end(),
        traj.tol,
    );
    FrameTrajectory::from_propagation(prop)
}

/// State, chart and fundamental matrix `R(t)` at each requested time
/// (ascending, non-negative), integrating exactly to every time.
pub fn fundamental_matrices(
    model: &HamiltonianModel,
    chart: usize,
    start: &PhasePoint,
    times: &[f64],
    tol: f64,
) -> Result<Vec<(PhasePoint, usize, DMatrix<f64>)>> {
    let n = model.dim();
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut state = start.clone();
    let mut c = chart;
    let mut r = DMatrix::<f64>::identity(2 * n, 2 * n);
    for &target in times {
        if target < t {
            return Err(Error::InvalidInput("times must be ascending and non-negative".into()));
        }
        if target > t {
            let prop = Propagation::run(model, c, &state, Some(&r), t, target, tol);
            if !prop.completed() {
                return Err(Error::Propagation {
                    t: prop.t_last(),
                    reason: format!("{:?}", prop.solution.outcome),
                });
            }
            let last = prop.solution.t.len() - 1;
            let (pt, chart_now, _, frame) = prop.grid_state(last);
            state = pt;
            c = chart_now;
            r = frame;
            t = target;
        }
        out.push((state.clone(), c, r.clone()));
    }
    Ok(out)
}

/// The frame at time 0 whose image at `t` is vertical, `R(t)⁻¹ {0} × ℝⁿ`,
/// from the symplectic inverse of the fundamental matrix.
pub fn arrival_frame_from_fundamental(r: &DMatrix<f64>) -> LagrangianFrame {
    let n = r.nrows() / 2;
    let r11 = r.view((0, 0), (n, n));
    let r12 = r.view((0, n), (n, n));
    let mut c = DMatrix::zeros(2 * n, n);
    c.view_mut((0, 0), (n, n)).copy_from(&(-r12.transpose()));
    c.view_mut((n, 0), (n, n)).copy_from(&r11.transpose());
    LagrangianFrame::new(c)
}

/// `J(x, t)` for the characteristic `traj`, expressed in the chart of its start.
pub fn vertical_arrival_frame(model: &HamiltonianModel, traj: &Trajectory, t: f64) -> Result<LagrangianFrame> {
    if !(0.0..=traj.t_end()).contains(&t) {
        return Err(Error::InvalidInput(format!("t = {t} lies outside the trajectory")));
    }
    let rs = fundamental_matrices(model, traj.charts[0], traj.start(), &[t], traj.tol)?;
    let frame = arrival_frame_from_fundamental(&rs[0].2);
    if frame.isotropy_residual > 1e-6 {
        return Err(Error::Propagation {
            t,
            reason: format!("arrival frame lost isotropy ({:.3e})", frame.isotropy_residual),
        });
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::catalog::euclidean_eikonal;
    use crate::hamiltonian::flow;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn symplectic_form_examples() {
        let e1 = v(&[1.0, 0.0]);
        let e2 = v(&[0.0, 1.0]);
        let z = v(&[0.0, 0.0]);
        assert_eq!(symplectic_form(&e1, &z, &z, &e1), 1.0);
        assert_eq!(symplectic_form(&e1, &z, &e2, &z), 0.0);
        let a = v(&[0.3, -1.2]);
        let b = v(&[2.0, 0.7]);
        assert_eq!(symplectic_form(&a, &b, &a, &b), 0.0);
        assert_eq!(symplectic_form_stacked(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn k_of_simple_frames() {
        assert!(matches!(
            extract_k(&LagrangianFrame::vertical(3), SVD_TOL),
            KExtraction::VerticalDegenerate { .. }
        ));
        let t = 0.7;
        let mut c = DMatrix::zeros(4, 2);
        c.view_mut((0, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * t));
        c.view_mut((2, 0), (2, 2)).fill_with_identity();
        match extract_k(&LagrangianFrame::new(c), SVD_TOL) {
            KExtraction::Graph { k, asymmetry } => {
                assert!((k - DMatrix::identity(2, 2) / t).abs().max() < 1e-14);
                assert_eq!(asymmetry, 0.0);
            }
            other => panic!("{other:?}"),
        }
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, -3.0]);
        let f = LagrangianFrame::graph(&k);
        assert!(f.isotropy_residual < 1e-15);
        assert_eq!(extract_k(&f, SVD_TOL).matrix().unwrap(), &k);
    }

    #[test]
    fn certification_rejects_non_isotropic_frames() {
        let mut c = DMatrix::zeros(4, 2);
        c[(0, 0)] = 1.0;
        c[(2, 1)] = 1.0;
        assert!(LagrangianFrame::certified(c, 1e-8).is_err());
        assert!(LagrangianFrame::certified(LagrangianFrame::vertical(2).columns, 1e-8).is_ok());
    }

    #[test]
    fn euclidean_vertical_frame_spreads_linearly() {
        let model = euclidean_eikonal(2);
        let traj = flow(&model, &PhasePoint::from_slices(&[0.0, 0.0], &[0.6, 0.8]), 1.5, 1e-12).unwrap();
        let ft = linearized_flow(&model, &traj, &LagrangianFrame::vertical(2));
        assert!(ft.truncated.is_none());
        assert_eq!(ft.frames[0], LagrangianFrame::vertical(2));
        for (t, f) in ft.times.iter().zip(&ft.frames) {
            assert!((f.hblock() - DMatrix::identity(2, 2) * *t).abs().max() < 1e-12);
            assert!((f.vblock() - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn euclidean_arrival_frame() {
        let model = euclidean_eikonal(2);
        let traj = flow(&model, &PhasePoint::from_slices(&[0.0, 0.0], &[1.0, 0.0]), 2.0, 1e-12).unwrap();
        let f = vertical_arrival_frame(&model, &traj, 1.25).unwrap();
        assert!((f.hblock() + DMatrix::identity(2, 2) * 1.25).abs().max() < 1e-12);
        assert!((f.vblock() - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        let k = extract_k(&f, SVD_TOL);
        assert!((k.matrix().unwrap() + DMatrix::identity(2, 2) / 1.25).abs().max() < 1e-11);

        let f0 = vertical_arrival_frame(&model, &traj, 1e-6).unwrap();
        assert!(f0.orthonormalized().hblock().norm() < 1e-5);
    }
}
