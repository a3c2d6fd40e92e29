//! Sample-based checks of the standing hypotheses on a model.

use nalgebra::{DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{HamiltonianModel, PhasePoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Worst value of the checked quantity over the sample.
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleIssue {
    pub sample: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub model: String,
    pub samples: usize,
    /// Growth proxy: for each `K`, the constant `C_K = max (K|p| − H)` over
    /// the sample, and whether covectors rescaled to a probe radius still
    /// satisfy `H ≥ K|p| − C_K`.
    pub superlinearity: Vec<HypothesisCheck>,
    pub convexity: HypothesisCheck,
    pub subsolution_at_zero: HypothesisCheck,
    pub gradients: HypothesisCheck,
    pub issues: Vec<SampleIssue>,
    pub second_derivatives: super::SecondDerivatives,
    pub smoothness: Option<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.superlinearity.iter().all(|c| c.passed)
            && self.convexity.passed
            && self.subsolution_at_zero.passed
            && self.gradients.passed
            && self.issues.is_empty()
    }
}

const GROWTH_CONSTANTS: [f64; 2] = [1.0, 10.0];
const PROBE_FACTOR: f64 = 10.0;
const PROBE_DOUBLINGS: usize = 20;

pub fn validate_model(model: &HamiltonianModel, samples: &[PhasePoint]) -> crate::Result<ValidationReport> {
    if samples.is_empty() {
        return Err(crate::Error::InvalidInput("validation needs at least one sample".into()));
    }
    let n = model.dim();
    let mut issues = Vec::new();
    let mut good: Vec<(usize, &PhasePoint, f64)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.dim() != n {
            issues.push(SampleIssue {
                sample: i,
                message: format!("dimension {} differs from model dimension {n}", s.dim()),
            });
            continue;
        }
        let h = model.value(&s.x, &s.p);
        if !h.is_finite() {
            issues.push(SampleIssue {
                sample: i,
                message: "H is not finite".into(),
            });
            continue;
        }
        good.push((i, s, h));
    }

    let max_p = good.iter().map(|(_, s, _)| s.p.norm()).fold(0.0_f64, f64::max);
    let base_probe = PROBE_FACTOR * max_p.max(1.0);
    let superlinearity = GROWTH_CONSTANTS
        .iter()
        .map(|&k| {
            let c_k = good
                .iter()
                .map(|(_, s, h)| k * s.p.norm() - h)
                .fold(f64::NEG_INFINITY, f64::max);
            let margin_at = |probe: f64| {
                let mut worst = f64::INFINITY;
                for (_, s, _) in &good {
                    let dir = if s.p.norm() > 0.0 {
                        s.p.normalize()
                    } else {
                        let mut e = DVector::zeros(n);
                        e[0] = 1.0;
                        e
                    };
                    let q = dir * probe;
                    worst = worst.min(model.value(&s.x, &q) - (k * probe - c_k));
                }
                worst
            };
            // Smallest doubling of the base radius where the bound holds at
            // that radius and the next one.
            let mut probe = base_probe;
            let mut worst = margin_at(probe);
            for _ in 0..PROBE_DOUBLINGS {
                if worst >= 0.0 && margin_at(2.0 * probe) >= 0.0 {
                    break;
                }
                probe *= 2.0;
                worst = margin_at(probe);
            }
            HypothesisCheck {
                name: format!("H1 growth proxy K={k}"),
                passed: c_k.is_finite() && worst >= 0.0,
                detail: format!("C_K = {c_k:.6e}; min margin at probe radius {probe:.3e} is {worst:.6e}"),
                worst,
            }
        })
        .collect();

    let mut min_eig = f64::INFINITY;
    let mut max_asym = 0.0_f64;
    for (i, s, _) in &good {
        let q = model.hessians(&s.x, &s.p).q;
        if q.iter().any(|v| !v.is_finite()) {
            issues.push(SampleIssue {
                sample: *i,
                message: "second derivative in p is not finite".into(),
            });
            continue;
        }
        max_asym = max_asym.max((&q - q.transpose()).abs().max());
        let sym = (&q + q.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym).eigenvalues.min();
        min_eig = min_eig.min(eig);
    }
    let convexity = HypothesisCheck {
        name: "H2 positive definite d2H/dp2".into(),
        passed: max_asym <= 1e-10 && min_eig > 0.0,
        detail: format!("smallest eigenvalue {min_eig:.6e}; symmetry residual {max_asym:.3e}"),
        worst: min_eig,
    };

    let zero = DVector::zeros(n);
    let worst_h0 = good
        .iter()
        .map(|(_, s, _)| model.value(&s.x, &zero) - model.level())
        .fold(f64::NEG_INFINITY, f64::max);
    let subsolution_at_zero = HypothesisCheck {
        name: "H3 H(x,0) below level".into(),
        passed: worst_h0 < 0.0,
        detail: format!("max H(x,0) - level = {worst_h0:.6e}"),
        worst: worst_h0,
    };

    let mut worst_grad = 0.0_f64;
    let mut grad_ok = true;
    for (_, s, h) in &good {
        let step = f64::EPSILON.cbrt() * (1.0 + (s.x.norm_squared() + s.p.norm_squared()).sqrt());
        let gx = model.grad_x(&s.x, &s.p);
        let gp = model.grad_p(&s.x, &s.p);
        for j in 0..n {
            let mut xp = s.x.clone();
            let mut xm = s.x.clone();
            xp[j] += step;
            xm[j] -= step;
            let fdx = (model.value(&xp, &s.p) - model.value(&xm, &s.p)) / (2.0 * step);
            let mut pp = s.p.clone();
            let mut pm = s.p.clone();
            pp[j] += step;
            pm[j] -= step;
            let fdp = (model.value(&s.x, &pp) - model.value(&s.x, &pm)) / (2.0 * step);
            let allowed = 1e-6_f64.max(1e-4 * h.abs());
            let err = (fdx - gx[j]).abs().max((fdp - gp[j]).abs());
            worst_grad = worst_grad.max(err / allowed);
            grad_ok &= err <= allowed;
        }
    }
    let gradients = HypothesisCheck {
        name: "gradient finite-difference agreement".into(),
        passed: grad_ok,
        detail: format!("worst error / allowance = {worst_grad:.3e}"),
        worst: worst_grad,
    };

    Ok(ValidationReport {
        model: model.name().to_string(),
        samples: samples.len(),
        superlinearity,
        convexity,
        subsolution_at_zero,
        gradients,
        issues,
        second_derivatives: model.second_derivatives(),
        smoothness: model.smoothness.clone(),
    })
}
