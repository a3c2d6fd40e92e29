//! Inversion chart transition `y ↦ y/|y|²` and its cotangent lift.
//!
//! The map is an involution, so the same formulas carry phase points and
//! tangent vectors in both directions. The lift preserves the canonical
//! symplectic form and maps vertical vectors to vertical vectors.

use nalgebra::DVector;

/// Two charts related by inversion; a trajectory leaves its chart once the
/// position norm exceeds `switch_radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionAtlas {
    pub switch_radius: f64,
}

impl InversionAtlas {
    pub fn new(switch_radius: f64) -> Self {
        assert!(switch_radius > 1.0, "switch radius must exceed 1 for hysteresis");
        Self { switch_radius }
    }

    pub fn should_leave(&self, x: &[f64]) -> bool {
        x.iter().map(|v| v * v).sum::<f64>().sqrt() > self.switch_radius
    }
}

pub fn invert(y: &DVector<f64>) -> DVector<f64> {
    y / y.norm_squared()
}

/// Cotangent lift `(y, p) ↦ (y/|y|², |y|²p − 2⟨y,p⟩y)`.
pub fn lift(y: &DVector<f64>, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let r2 = y.norm_squared();
    let w = y / r2;
    let pw = p * r2 - y * (2.0 * y.dot(p));
    (w, pw)
}

/// Differential of the inversion applied to a position perturbation.
pub fn position_tangent(y: &DVector<f64>, dy: &DVector<f64>) -> DVector<f64> {
    let r2 = y.norm_squared();
    dy / r2 - y * (2.0 * y.dot(dy) / (r2 * r2))
}

/// Differential of [`lift`] at `(y, p)` applied to `(dy, dp)`.
pub fn lift_tangent(
    y: &DVector<f64>,
    p: &DVector<f64>,
    dy: &DVector<f64>,
    dp: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let r2 = y.norm_squared();
    let ydy = y.dot(dy);
    let dw = position_tangent(y, dy);
    let dpw = p * (2.0 * ydy) - y * (2.0 * dy.dot(p)) - dy * (2.0 * y.dot(p)) + dp * r2 - y * (2.0 * y.dot(dp));
    (dw, dpw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linearized::symplectic_form;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn lift_is_an_involution() {
        let y = v(&[0.3, -1.7, 0.4]);
        let p = v(&[1.1, 0.2, -0.5]);
        let (w, pw) = lift(&y, &p);
        let (y2, p2) = lift(&w, &pw);
        assert!((y2 - &y).norm() < 1e-14);
        assert!((p2 - &p).norm() < 1e-13);
    }

    #[test]
    fn lift_preserves_pairing_and_symplectic_form() {
        let y = v(&[1.3, -0.6]);
        let p = v(&[0.4, 0.9]);
        let a = (v(&[0.2, 0.5]), v(&[-0.3, 0.1]));
        let b = (v(&[-0.7, 0.05]), v(&[0.6, 0.8]));
        let la = lift_tangent(&y, &p, &a.0, &a.1);
        let lb = lift_tangent(&y, &p, &b.0, &b.1);
        let before = symplectic_form(&a.0, &a.1, &b.0, &b.1);
        let after = symplectic_form(&la.0, &la.1, &lb.0, &lb.1);
        assert!((before - after).abs() < 1e-13);

        // <p, dy> is the same covector pairing in both charts
        let (_, pw) = lift(&y, &p);
        let dw = position_tangent(&y, &a.0);
        assert!((pw.dot(&dw) - p.dot(&a.0)).abs() < 1e-14);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let y = v(&[0.8, 1.9]);
        let p = v(&[-0.4, 0.3]);
        let dy = v(&[0.3, -0.2]);
        let dp = v(&[0.1, 0.7]);
        let eps = 1e-6;
        let (wp, pwp) = lift(&(&y + &dy * eps), &(&p + &dp * eps));
        let (wm, pwm) = lift(&(&y - &dy * eps), &(&p - &dp * eps));
        let (dw, dpw) = lift_tangent(&y, &p, &dy, &dp);
        assert!(((wp - wm) / (2.0 * eps) - dw).norm() < 1e-8);
        assert!(((pwp - pwm) / (2.0 * eps) - dpw).norm() < 1e-8);
    }
}
