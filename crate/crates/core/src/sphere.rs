//! Round sphere in stereographic coordinates: chart maps, the round and
//! conformally perturbed Hamiltonians, closed-form geodesics and the
//! closed-form `K`, `U` matrices of the equator-source problem.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{Hamiltonian, HamiltonianModel, Hessians, InversionAtlas};
use crate::ode::{integrate, Dopri5Options, OdeSystem, StepAction};

/// Chart radius beyond which flows move to the inverted chart.
pub const SWITCH_RADIUS: f64 = 2.0;

/// Stereographic projection from the north pole, `(x, λ) ↦ x / (1 − λ)`.
pub fn project(point: &[f64]) -> Result<DVector<f64>> {
    let n = point.len().checked_sub(1).filter(|&n| n >= 1).ok_or_else(|| {
        Error::InvalidInput("a sphere point needs at least two coordinates".into())
    })?;
    let lambda = point[n];
    if (1.0 - lambda).abs() < 1e-14 {
        return Err(Error::InvalidInput("the north pole has no chart image".into()));
    }
    Ok(DVector::from_fn(n, |i, _| point[i] / (1.0 - lambda)))
}

/// Inverse projection `y ↦ (2y, |y|² − 1) / (1 + |y|²)`.
pub fn unproject(y: &[f64]) -> DVector<f64> {
    let n = y.len();
    let r2: f64 = y.iter().map(|v| v * v).sum();
    let d = 1.0 + r2;
    DVector::from_fn(n + 1, |i, _| if i < n { 2.0 * y[i] / d } else { (r2 - 1.0) / d })
}

/// Pushforward of the round metric, `4|v|² / (1 + |y|²)²`.
pub fn round_metric(y: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let r = 1.0 + y.norm_squared();
    4.0 * v.norm_squared() / (r * r)
}

/// `H(y, p) = (1 + |y|²)² |p|² / 8`.
#[derive(Debug, Clone, Copy)]
pub struct RoundSphere {
    pub n: usize,
}

impl RoundSphere {
    fn parts(y: &DVector<f64>, p: &DVector<f64>) -> (f64, f64) {
        (1.0 + y.norm_squared(), p.norm_squared())
    }
}

impl Hamiltonian for RoundSphere {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, y: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let (r, p2) = Self::parts(y, p);
        r * r * p2 / 8.0
    }
    fn grad_x(&self, y: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let (r, p2) = Self::parts(y, p);
        y * (r * p2 / 2.0)
    }
    fn grad_p(&self, y: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let (r, _) = Self::parts(y, p);
        p * (r * r / 4.0)
    }
    fn hessians(&self, y: &DVector<f64>, p: &DVector<f64>) -> Option<Hessians> {
        let n = y.len();
        let (r, p2) = Self::parts(y, p);
        let a = y * y.transpose() * p2 + DMatrix::identity(n, n) * (r * p2 / 2.0);
        let b = y * p.transpose() * r;
        let q = DMatrix::identity(n, n) * (r * r / 4.0);
        Some(Hessians { a, b, q })
    }
}

/// Round sphere model with level ½ on the two inversion-related charts.
pub fn round_model(n: usize) -> HamiltonianModel {
    assert!(n >= 2, "dimension must be at least 2");
    let mut model = HamiltonianModel::new("sphere-chart", Arc::new(RoundSphere { n }), 0.5)
        .with_inversion_chart(Arc::new(RoundSphere { n }), InversionAtlas::new(SWITCH_RADIUS));
    model.smoothness = Some("C^inf".into());
    model
}

/// A scalar field with analytic first and second derivatives.
pub trait ConformalField: Send + Sync {
    fn value(&self, y: &DVector<f64>) -> f64;
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

/// `φ(y) = Σ a exp(−|y − c|² / (2w²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBumps {
    pub bumps: Vec<Bump>,
}

impl GaussianBumps {
    /// Radius beyond which every bump underflows to zero.
    pub fn negligible_radius(&self) -> f64 {
        self.bumps
            .iter()
            .map(|b| b.center.iter().map(|c| c * c).sum::<f64>().sqrt() + 40.0 * b.width)
            .fold(0.0, f64::max)
    }

    fn each<F: FnMut(&Bump, DVector<f64>, f64)>(&self, y: &DVector<f64>, mut f: F) {
        for b in &self.bumps {
            let d = y - DVector::from_row_slice(&b.center);
            let e = b.amplitude * (-d.norm_squared() / (2.0 * b.width * b.width)).exp();
            f(b, d, e);
        }
    }
}

impl ConformalField for GaussianBumps {
    fn value(&self, y: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        self.each(y, |_, _, e| s += e);
        s
    }
    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(y.len());
        self.each(y, |b, d, e| g -= d * (e / (b.width * b.width)));
        g
    }
    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = y.len();
        let mut h = DMatrix::zeros(n, n);
        self.each(y, |b, d, e| {
            let w2 = b.width * b.width;
            h += (&d * d.transpose() / (w2 * w2) - DMatrix::identity(n, n) / w2) * e;
        });
        h
    }
}

/// `φ ∘ ι` with the inversion `ι(w) = w/|w|²`; vanishes where `|ι(w)|`
/// exceeds `cutoff`.
pub struct Inverted {
    pub inner: Arc<dyn ConformalField>,
    pub cutoff: f64,
}

impl Inverted {
    fn active(&self, w: &DVector<f64>) -> bool {
        w.norm_squared() * self.cutoff * self.cutoff > 1.0
    }

    fn jacobian(w: &DVector<f64>) -> DMatrix<f64> {
        let n = w.len();
        let r2 = w.norm_squared();
        DMatrix::identity(n, n) / r2 - w * w.transpose() * (2.0 / (r2 * r2))
    }
}

impl ConformalField for Inverted {
    fn value(&self, w: &DVector<f64>) -> f64 {
        if !self.active(w) {
            return 0.0;
        }
        self.inner.value(&(w / w.norm_squared()))
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        if !self.active(w) {
            return DVector::zeros(w.len());
        }
        let y = w / w.norm_squared();
        Self::jacobian(w).transpose() * self.inner.gradient(&y)
    }
    fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n = w.len();
        if !self.active(w) {
            return DMatrix::zeros(n, n);
        }
        let r2 = w.norm_squared();
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let y = w / r2;
        let jac = Self::jacobian(w);
        let g = self.inner.gradient(&y);
        let mut h = jac.transpose() * self.inner.hessian(&y) * &jac;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for (k, gk) in g.iter().enumerate() {
                    let dik = if i == k { 1.0 } else { 0.0 };
                    let dij = if i == j { 1.0 } else { 0.0 };
                    let djk = if j == k { 1.0 } else { 0.0 };
                    let d2 = -2.0 * dik * w[j] / r4 - 2.0 * (dij * w[k] + w[i] * djk) / r4
                        + 8.0 * w[i] * w[j] * w[k] / r6;
                    s += gk * d2;
                }
                h[(i, j)] += s;
            }
        }
        h
    }
}

/// `H_ε = e^{−2εφ} H_round`, the dual of the metric `e^{2εφ} g_round`.
pub struct ConformalSphere {
    pub n: usize,
    pub epsilon: f64,
    pub field: Arc<dyn ConformalField>,
}

impl ConformalSphere {
    fn factor(&self, y: &DVector<f64>) -> f64 {
        (-2.0 * self.epsilon * self.field.value(y)).exp()
    }
}

impl Hamiltonian for ConformalSphere {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, y: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let h0 = RoundSphere { n: self.n }.value(y, p);
        if self.epsilon == 0.0 {
            return h0;
        }
        self.factor(y) * h0
    }
    fn grad_x(&self, y: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let round = RoundSphere { n: self.n };
        if self.epsilon == 0.0 {
            return round.grad_x(y, p);
        }
        let e = self.factor(y);
        let grad_e = self.field.gradient(y) * (-2.0 * self.epsilon * e);
        round.grad_x(y, p) * e + grad_e * round.value(y, p)
    }
    fn grad_p(&self, y: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let round = RoundSphere { n: self.n };
        if self.epsilon == 0.0 {
            return round.grad_p(y, p);
        }
        round.grad_p(y, p) * self.factor(y)
    }
    fn hessians(&self, y: &DVector<f64>, p: &DVector<f64>) -> Option<Hessians> {
        let round = RoundSphere { n: self.n };
        let h0 = round.hessians(y, p)?;
        if self.epsilon == 0.0 {
            return Some(h0);
        }
        let eps = self.epsilon;
        let e = self.factor(y);
        let gphi = self.field.gradient(y);
        let grad_e = &gphi * (-2.0 * eps * e);
        let hess_e = (&gphi * gphi.transpose() * (4.0 * eps * eps) - self.field.hessian(y) * (2.0 * eps)) * e;
        let v0 = round.value(y, p);
        let gx0 = round.grad_x(y, p);
        let gp0 = round.grad_p(y, p);
        let a = h0.a * e + &grad_e * gx0.transpose() + &gx0 * grad_e.transpose() + hess_e * v0;
        let b = h0.b * e + &grad_e * gp0.transpose();
        let q = h0.q * e;
        Some(Hessians { a, b, q })
    }
}

fn default_c4_bound() -> f64 {
    1.0
}

fn default_region() -> f64 {
    3.0
}

/// Conformal perturbation `g_ε = e^{2εφ} g_round` with `φ` a sum of bumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub epsilon: f64,
    pub bumps: Vec<Bump>,
    /// Declared bound on `ε · max |∂^k φ|`, `k ≤ 4`, over the working region.
    #[serde(default = "default_c4_bound")]
    pub c4_bound: f64,
    /// Half-width of the chart box on which the bound is checked.
    #[serde(default = "default_region")]
    pub region: f64,
}

impl PerturbationSpec {
    pub fn field(&self) -> GaussianBumps {
        GaussianBumps {
            bumps: self.bumps.clone(),
        }
    }

    /// `ε` times the largest finite-difference derivative of `φ` of order
    /// 0 to 4 along coordinate and diagonal directions on a grid of the
    /// region.
    pub fn c4_proxy(&self, n: usize) -> f64 {
        let field = self.field();
        let per_axis: usize = if n <= 2 { 41 } else { 13 };
        let step = 0.02;
        let mut dirs: Vec<DVector<f64>> = Vec::new();
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            dirs.push(e);
            for j in i + 1..n {
                let mut d = DVector::zeros(n);
                d[i] = std::f64::consts::FRAC_1_SQRT_2;
                d[j] = std::f64::consts::FRAC_1_SQRT_2;
                dirs.push(d.clone());
                d[j] = -d[j];
                dirs.push(d);
            }
        }
        let mut worst = 0.0_f64;
        let total = per_axis.pow(n as u32);
        for idx in 0..total {
            let mut rem = idx;
            let y = DVector::from_fn(n, |_, _| {
                let k = rem % per_axis;
                rem /= per_axis;
                -self.region + 2.0 * self.region * k as f64 / (per_axis - 1) as f64
            });
            let f0 = field.value(&y);
            worst = worst.max(f0.abs());
            for d in &dirs {
                let f = |k: f64| field.value(&(&y + d * (k * step)));
                let (fm2, fm1, fp1, fp2) = (f(-2.0), f(-1.0), f(1.0), f(2.0));
                let d1 = (fp1 - fm1) / (2.0 * step);
                let d2 = (fp1 - 2.0 * f0 + fm1) / step.powi(2);
                let d3 = (fp2 - 2.0 * fp1 + 2.0 * fm1 - fm2) / (2.0 * step.powi(3));
                let d4 = (fp2 - 4.0 * fp1 + 6.0 * f0 - 4.0 * fm1 + fm2) / step.powi(4);
                worst = worst.max(d1.abs()).max(d2.abs()).max(d3.abs()).max(d4.abs());
            }
        }
        self.epsilon.abs() * worst
    }

    pub fn check(&self, n: usize) -> Result<f64> {
        for (i, b) in self.bumps.iter().enumerate() {
            if b.center.len() != n {
                return Err(Error::Config(format!("bump {i} center has dimension {}, expected {n}", b.center.len())));
            }
            if !(b.width > 0.0) || !b.amplitude.is_finite() {
                return Err(Error::Config(format!("bump {i} needs a positive width and finite amplitude")));
            }
        }
        if !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be finite".into()));
        }
        let proxy = self.c4_proxy(n);
        if proxy > self.c4_bound {
            return Err(Error::Config(format!(
                "perturbation C4 proxy {proxy:.4e} exceeds the declared bound {:.4e}",
                self.c4_bound
            )));
        }
        Ok(proxy)
    }
}

/// Perturbed round sphere model; `ε = 0` reproduces [`round_model`] exactly.
pub fn perturbed_model(n: usize, spec: &PerturbationSpec) -> Result<HamiltonianModel> {
    spec.check(n)?;
    let field = Arc::new(spec.field());
    let cutoff = field.negligible_radius();
    let primary = ConformalSphere {
        n,
        epsilon: spec.epsilon,
        field: field.clone(),
    };
    let alternate = ConformalSphere {
        n,
        epsilon: spec.epsilon,
        field: Arc::new(Inverted { inner: field, cutoff }),
    };
    let mut model = HamiltonianModel::new("sphere-chart-perturbed", Arc::new(primary), 0.5)
        .with_inversion_chart(Arc::new(alternate), InversionAtlas::new(SWITCH_RADIUS));
    model.smoothness = Some("C^inf".into());
    Ok(model)
}

/// Closed-form geodesic from `ȳ = (−1, 0, …, 0)` with unit sphere velocity
/// `v` (last component along the projection axis).
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormGeodesic {
    pub position: DVector<f64>,
    pub covector: DVector<f64>,
    /// Crossing point with `{y₁ = 0}` at `t = π/2`.
    pub z: DVector<f64>,
}

pub fn geodesic_closed_form(v: &[f64], t: f64) -> Result<ClosedFormGeodesic> {
    let n = v.len();
    if n < 2 {
        return Err(Error::InvalidInput("velocity needs at least two components".into()));
    }
    let vn = v[n - 1];
    let d = 1.0 - t.sin() * vn;
    if d.abs() < 1e-12 {
        return Err(Error::InvalidInput(format!("geodesic reaches the projection pole at t = {t}")));
    }
    if (1.0 - vn).abs() < 1e-12 {
        return Err(Error::InvalidInput("v_n = 1 has no crossing point".into()));
    }
    let position = DVector::from_fn(n, |i, _| if i == 0 { -t.cos() / d } else { t.sin() * v[i - 1] / d });
    let covector = DVector::from_fn(n, |i, _| if i == 0 { t.sin() - vn } else { t.cos() * v[i - 1] });
    let z = DVector::from_fn(n, |i, _| if i == 0 { 0.0 } else { v[i - 1] / (1.0 - vn) });
    Ok(ClosedFormGeodesic { position, covector, z })
}

/// Unit sphere velocity `v` whose crossing point is `z` (with `z₁ = 0`).
pub fn velocity_for_crossing(z: &[f64]) -> DVector<f64> {
    let n = z.len();
    let r = 1.0 + z.iter().map(|c| c * c).sum::<f64>();
    DVector::from_fn(n, |i, _| if i + 1 < n { 2.0 * z[i + 1] / r } else { (r - 2.0) / r })
}

/// Sign convention for the cotangent entries of the closed-form `K(z,s)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GapConvention {
    /// Cotangent entries `−4 cot(s)/(1+|z|²)²` in `K`; agrees with the
    /// integrated linearized flow.
    Derived,
    /// Cotangent entries with the opposite sign, as typeset in the source
    /// derivation.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormGap {
    pub k: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub gap: DMatrix<f64>,
}

/// The matrix `U(z)` of the equator source `{y₁ = 0}`.
pub fn closed_form_u(z: &[f64]) -> DMatrix<f64> {
    let n = z.len();
    let r = 1.0 + z.iter().map(|c| c * c).sum::<f64>();
    let c = -4.0 / (r * r);
    let mut u = DMatrix::zeros(n, n);
    for i in 1..n {
        u[(0, i)] = c * z[i];
        u[(i, 0)] = c * z[i];
    }
    u
}

/// `K(z,s)`, `U(z)` and `K − U` for `s ∈ (0, π)`.
pub fn closed_form_gap(z: &[f64], s: f64, convention: GapConvention) -> Result<ClosedFormGap> {
    if !(s > 0.0 && s < std::f64::consts::PI) {
        return Err(Error::InvalidInput(format!("s = {s} lies outside (0, π)")));
    }
    let n = z.len();
    let r = 1.0 + z.iter().map(|c| c * c).sum::<f64>();
    let c = -4.0 / (r * r);
    let cot = s.cos() / s.sin();
    let diag = match convention {
        GapConvention::Derived => cot,
        GapConvention::AsPrinted => -cot,
    };
    let u = closed_form_u(z);
    let mut k = u.clone();
    k[(0, 0)] = c / s;
    for i in 1..n {
        k[(i, i)] = c * diag;
    }
    let gap = &k - &u;
    Ok(ClosedFormGap { k, u, gap })
}

/// `∇f` for the conformal factor `f = log 2 − log(1 + |y|²)`.
fn grad_f(y: &DVector<f64>) -> DVector<f64> {
    y * (-2.0 / (1.0 + y.norm_squared()))
}

struct Transport {
    v: DVector<f64>,
}

impl Transport {
    fn curve(&self, s: f64) -> (DVector<f64>, DVector<f64>) {
        let t = s + std::f64::consts::FRAC_PI_2;
        let n = self.v.len();
        let vn = self.v[n - 1];
        let d = 1.0 - t.sin() * vn;
        let pos = DVector::from_fn(n, |i, _| if i == 0 { -t.cos() / d } else { t.sin() * self.v[i - 1] / d });
        let vel = DVector::from_fn(n, |i, _| {
            if i == 0 {
                (t.sin() - vn) / (d * d)
            } else {
                t.cos() * self.v[i - 1] / (d * d)
            }
        });
        (pos, vel)
    }
}

impl OdeSystem for Transport {
    fn dim(&self) -> usize {
        self.v.len() * self.v.len()
    }
    fn rhs(&self, s: f64, y: &[f64], dy: &mut [f64]) -> bool {
        let n = self.v.len();
        let (pos, vel) = self.curve(s);
        let gf = grad_f(&pos);
        let df_vel = gf.dot(&vel);
        for c in 0..n {
            let e = DVector::from_row_slice(&y[c * n..(c + 1) * n]);
            let de = -(&e * df_vel) - &vel * gf.dot(&e) + &gf * vel.dot(&e);
            dy[c * n..(c + 1) * n].copy_from_slice(de.as_slice());
        }
        dy.iter().all(|v| v.is_finite())
    }
}

/// Parallel frame `E_1, …, E_n` along the geodesic leaving `z` normally to
/// `{y₁ = 0}`, as the columns of the returned matrix.
pub fn parallel_frame(z: &[f64], s: f64) -> Result<DMatrix<f64>> {
    let n = z.len();
    if !(0.0..=std::f64::consts::PI - 0.01).contains(&s) {
        return Err(Error::InvalidInput(format!("s = {s} outside [0, π − 0.01]")));
    }
    let v = velocity_for_crossing(z);
    let vn = v[n - 1];
    let mut y0 = vec![0.0; n * n];
    y0[0] = 1.0 / (1.0 - vn);
    for i in 1..n {
        y0[i * n + i] = 1.0;
    }
    let sys = Transport { v };
    let sol = integrate(&sys, 0.0, &y0, s, &Dopri5Options::with_tol(1e-13), |_, _| StepAction::Continue);
    if !sol.outcome.is_completed() {
        return Err(Error::Propagation {
            t: sol.t_last(),
            reason: format!("parallel transport stopped: {:?}", sol.outcome),
        });
    }
    Ok(DMatrix::from_column_slice(n, n, sol.y_last()))
}

/// `θ̇_V(s + π/2)` for the velocity with crossing point `z`.
pub fn first_frame_closed_form(z: &[f64], s: f64) -> DVector<f64> {
    Transport {
        v: velocity_for_crossing(z),
    }
    .curve(s)
    .1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{coeff_matrices, flow, PhasePoint};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn chart_maps_fixed_points() {
        assert!(project(&[0.0, 0.0, -1.0]).unwrap().norm() < 1e-15);
        assert_eq!(project(&[-1.0, 0.0, 0.0]).unwrap(), v(&[-1.0, 0.0]));
        assert!(project(&[0.0, 0.0, 1.0]).is_err());
        let x = unproject(&[0.3, -2.0]);
        assert!((x.norm() - 1.0).abs() < 1e-15);
        assert!((project(x.as_slice()).unwrap() - v(&[0.3, -2.0])).norm() < 1e-14);
    }

    #[test]
    fn round_model_values() {
        let m = round_model(3);
        assert_eq!(m.value(&v(&[0.0, 0.0, 0.0]), &v(&[2.0, 0.0, 0.0])), 0.5);
        assert_eq!(round_metric(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])), 20.0);
        let c = coeff_matrices(&m, &PhasePoint::from_slices(&[0.0; 3], &[2.0, 0.0, 0.0])).unwrap();
        assert_eq!(c.q, DMatrix::identity(3, 3) * 0.25);
        assert_eq!(c.b, DMatrix::zeros(3, 3));
        // A = (r|p|²/2) I at y = 0
        assert_eq!(c.a, DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn round_hamiltonian_is_invariant_under_inversion() {
        let h = RoundSphere { n: 2 };
        let y = v(&[0.7, -1.9]);
        let p = v(&[0.3, 1.1]);
        let (w, q) = crate::hamiltonian::atlas::lift(&y, &p);
        assert!((h.value(&y, &p) - h.value(&w, &q)).abs() < 1e-13);
    }

    #[test]
    fn closed_form_geodesic_examples() {
        let g = geodesic_closed_form(&[0.0, -1.0], 0.0).unwrap();
        assert_eq!(g.position, v(&[-1.0, 0.0]));
        let g = geodesic_closed_form(&[0.0, -1.0], FRAC_PI_2).unwrap();
        assert!(g.position.norm() < 1e-15);
        assert!((g.covector.clone() - v(&[2.0, 0.0])).norm() < 1e-15);
        for alpha in [-1.0, -0.3, 0.2, 0.9_f64] {
            let g = geodesic_closed_form(&[alpha.sin(), -alpha.cos()], 0.4).unwrap();
            assert!((g.z[1] - (alpha / 2.0).tan()).abs() < 1e-14);
            assert_eq!(g.z[0], 0.0);
        }
    }

    #[test]
    fn crossing_relation_holds_on_velocity_mesh() {
        for k in 0..50 {
            let a = -1.0 + 2.0 * k as f64 / 49.0;
            let vel = [a.sin(), -a.cos()];
            let z = geodesic_closed_form(&vel, 0.0).unwrap().z;
            let lhs = 1.0 + z.norm_squared();
            assert!((lhs - 2.0 / (1.0 - vel[1])).abs() < 1e-13 * lhs);
            let back = velocity_for_crossing(z.as_slice());
            assert!((back - v(&vel)).norm() < 1e-14);
        }
    }

    #[test]
    fn closed_form_matches_numerical_flow() {
        let model = round_model(3);
        for vel in [[0.0, 0.0, -1.0], [0.6, 0.0, -0.8], [0.3, -0.4, -(0.75f64).sqrt()]] {
            let g0 = geodesic_closed_form(&vel, 0.0).unwrap();
            let start = PhasePoint::new(g0.position, g0.covector);
            for t in [0.5, 1.5, PI - 0.1] {
                let traj = flow(&model, &start, t, 1e-12).unwrap();
                let end = model.to_primary(traj.end_chart(), &traj.end().x, &traj.end().p);
                let g = geodesic_closed_form(&vel, t).unwrap();
                assert!((end.x - g.position).norm() < 1e-8, "t = {t}");
                assert!((end.p - g.covector).norm() < 1e-8, "t = {t}");
            }
        }
    }

    #[test]
    fn gap_examples() {
        let g = closed_form_gap(&[0.0, 0.0], FRAC_PI_4, GapConvention::AsPrinted).unwrap();
        assert!((g.gap[(0, 0)] + 16.0 / PI).abs() < 1e-14);
        assert!((g.gap[(1, 1)] - 4.0).abs() < 1e-14);
        assert_eq!(g.gap[(0, 1)], 0.0);
        let g = closed_form_gap(&[0.0, 0.0], FRAC_PI_4, GapConvention::Derived).unwrap();
        assert!((g.gap[(1, 1)] + 4.0).abs() < 1e-14);

        let g = closed_form_gap(&[0.0, 0.0], FRAC_PI_2, GapConvention::AsPrinted).unwrap();
        assert!((g.gap[(0, 0)] + 8.0 / PI).abs() < 1e-14);
        assert!(g.gap[(1, 1)].abs() < 1e-15);
        assert_eq!(closed_form_u(&[0.0, 0.0]), DMatrix::zeros(2, 2));
        assert!(closed_form_gap(&[0.0, 0.0], PI, GapConvention::Derived).is_err());
    }

    #[test]
    fn gap_annihilates_transverse_vector_at_half_pi() {
        for z2 in [-1.0, -0.25, 0.0, 0.5, 1.0] {
            for conv in [GapConvention::Derived, GapConvention::AsPrinted] {
                let g = closed_form_gap(&[0.0, z2, 0.3], FRAC_PI_2, conv).unwrap();
                let e2 = v(&[0.0, 1.0, 0.0]);
                assert!((g.gap.clone() * &e2).dot(&e2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parallel_frame_initial_data_and_first_vector() {
        let z = [0.0, 0.4];
        let vel = velocity_for_crossing(&z);
        let e = parallel_frame(&z, 0.0).unwrap();
        assert!((e.column(0) - v(&[1.0 / (1.0 - vel[1]), 0.0])).norm() < 1e-15);
        assert!((e.column(1) - v(&[0.0, 1.0])).norm() < 1e-15);

        // derivative of E1 at 0 from the closed form
        let h = 1e-5;
        let d = (first_frame_closed_form(&z, h) - first_frame_closed_form(&z, -h)) / (2.0 * h);
        let expect = v(&[0.0, -vel[0] / (1.0 - vel[1]).powi(2)]);
        assert!((d - expect).norm() < 1e-8);

        for s in [0.3, 1.2, 2.5, PI - 0.01] {
            let e = parallel_frame(&z, s).unwrap();
            assert!((e.column(0) - first_frame_closed_form(&z, s)).norm() < 1e-8, "s = {s}");
        }
    }

    #[test]
    fn parallel_frame_is_an_isometry() {
        let z = [0.0, -0.7, 0.2];
        let t = Transport {
            v: velocity_for_crossing(&z),
        };
        let e0 = parallel_frame(&z, 0.0).unwrap();
        let (p0, _) = t.curve(0.0);
        for s in [0.5, 1.5, 3.0] {
            let e = parallel_frame(&z, s).unwrap();
            let (p, _) = t.curve(s);
            for i in 0..3 {
                let a = round_metric(&p0, &e0.column(i).into_owned());
                let b = round_metric(&p, &e.column(i).into_owned());
                assert!((a - b).abs() < 1e-8);
            }
            let g01 = 4.0 * e.column(0).dot(&e.column(1)) / (1.0 + p.norm_squared()).powi(2);
            assert!(g01.abs() < 1e-8);
        }
    }

    fn bump_spec(eps: f64) -> PerturbationSpec {
        PerturbationSpec {
            epsilon: eps,
            bumps: vec![Bump {
                center: vec![0.4, 0.3],
                width: 0.6,
                amplitude: 1.0,
            }],
            c4_bound: 2.0,
            region: 3.0,
        }
    }

    #[test]
    fn zero_perturbation_is_bitwise_round() {
        let p = perturbed_model(2, &bump_spec(0.0)).unwrap();
        let r = round_model(2);
        let y = v(&[0.3, -0.2]);
        let q = v(&[1.0, 0.7]);
        for c in 0..2 {
            assert_eq!(p.chart(c).value(&y, &q).to_bits(), r.chart(c).value(&y, &q).to_bits());
            assert_eq!(p.chart(c).grad_x(&y, &q), r.chart(c).grad_x(&y, &q));
            assert_eq!(p.chart(c).grad_p(&y, &q), r.chart(c).grad_p(&y, &q));
            assert_eq!(p.hessians_in(c, &y, &q), r.hessians_in(c, &y, &q));
        }
    }

    #[test]
    fn perturbed_derivatives_match_finite_differences() {
        let model = perturbed_model(2, &bump_spec(0.05)).unwrap();
        let fd = model.clone().with_finite_difference_hessians();
        for chart in 0..2 {
            for (y, p) in [([0.2, 0.5], [1.0, -0.3]), ([0.9, 1.4], [0.2, 0.8]), ([-0.3, 0.05], [0.5, 0.5])] {
                let y = v(&y);
                let p = v(&p);
                let an = model.hessians_in(chart, &y, &p);
                let nu = fd.hessians_in(chart, &y, &p);
                assert!((an.a - nu.a).abs().max() < 1e-7, "chart {chart}");
                assert!((an.b - nu.b).abs().max() < 1e-7);
                assert!((an.q - nu.q).abs().max() < 1e-7);
                let h = model.chart(chart);
                let step = 1e-6;
                for j in 0..2 {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[j] += step;
                    ym[j] -= step;
                    let d = (h.value(&yp, &p) - h.value(&ym, &p)) / (2.0 * step);
                    assert!((d - h.grad_x(&y, &p)[j]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn alternate_chart_is_the_inverted_primary() {
        let model = perturbed_model(2, &bump_spec(0.05)).unwrap();
        let y = v(&[0.6, 0.9]);
        let p = v(&[0.4, -1.3]);
        let (w, q) = crate::hamiltonian::atlas::lift(&y, &p);
        let a = model.chart(0).value(&y, &p);
        let b = model.chart(1).value(&w, &q);
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn c4_bound_is_enforced() {
        let mut spec = bump_spec(0.05);
        assert!(spec.check(2).unwrap() < 2.0);
        spec.c4_bound = 1e-4;
        assert!(matches!(perturbed_model(2, &spec), Err(Error::Config(_))));
    }
}
