//! Numeric pipeline checked against the round-sphere closed forms and
//! against structural identities of the linearized flow.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{atlas, HamiltonianModel, Propagation};
use crate::linearized::{arrival_frame_from_fundamental, extract_k, fundamental_matrices, symplectic_form_stacked, SVD_TOL};
use crate::source::{make_sample, ParamBox, SourceSample, SourceSpec, SurfaceChart};
use crate::sphere::{closed_form_gap, closed_form_u, round_model, GapConvention};

/// The equator `{y₁ = 0}` as a hyperplane patch over `[−1, 1]^{n−1}`.
pub fn equator_patch(n: usize) -> SourceSpec {
    SourceSpec::Hypersurface {
        chart: SurfaceChart::Hyperplane {
            origin: vec![0.0; n],
            tangents: (1..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    e
                })
                .collect(),
        },
        param_box: ParamBox {
            lower: vec![-1.0; n - 1],
            upper: vec![1.0; n - 1],
            periodic: vec![],
        },
        orientation: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub z: Vec<f64>,
    pub s: f64,
    /// `max |K_num − K| / max |K|` against the derived closed form.
    pub k_residual: f64,
    /// The same against the matrix as printed.
    pub k_residual_as_printed: f64,
    /// `max |U_num − U|`.
    pub u_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub n: usize,
    pub rows: Vec<OracleRow>,
    pub max_k_residual: f64,
    pub max_k_residual_as_printed: f64,
    pub max_u_residual: f64,
}

/// `K(z, s)` and `U(z)` of the equator source on a `per_axis^{n−1}` grid
/// of `[−1, 1]^{n−1}` and `s_count` times in `[s_lo, s_hi]`.
pub fn equator_oracle(n: usize, per_axis: usize, s_lo: f64, s_hi: f64, s_count: usize, tol: f64) -> Result<OracleSummary> {
    if n < 2 || per_axis < 2 || s_count < 2 || !(s_lo > 0.0 && s_hi > s_lo) {
        return Err(Error::InvalidInput("oracle grid needs n ≥ 2, two points per axis and 0 < s_lo < s_hi".into()));
    }
    let model = round_model(n);
    let src = equator_patch(n);
    let params = src.parameters(n, per_axis)?;
    let times: Vec<f64> = (0..s_count).map(|k| s_lo + (s_hi - s_lo) * k as f64 / (s_count - 1) as f64).collect();
    let rows: Vec<Result<Vec<OracleRow>>> = params
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let sample = make_sample(&model, &src, i, u)?;
            let mut z = vec![0.0];
            z.extend_from_slice(u);
            let u_num = extract_k(&sample.frame, SVD_TOL)
                .matrix()
                .cloned()
                .ok_or_else(|| Error::DegenerateFrame("initial frame is vertical".into()))?;
            let u_residual = (&u_num - closed_form_u(&z)).abs().max();
            let rs = fundamental_matrices(&model, sample.chart, &sample.start(), &times, tol)?;
            let mut out = Vec::with_capacity(times.len());
            for (&s, (_, _, r)) in times.iter().zip(rs) {
                let k = extract_k(&arrival_frame_from_fundamental(&r), SVD_TOL)
                    .matrix()
                    .cloned()
                    .ok_or_else(|| Error::DegenerateFrame(format!("arrival frame vertical at s = {s}")))?;
                let derived = closed_form_gap(&z, s, GapConvention::Derived)?.k;
                let printed = closed_form_gap(&z, s, GapConvention::AsPrinted)?.k;
                out.push(OracleRow {
                    z: z.clone(),
                    s,
                    k_residual: (&k - &derived).abs().max() / derived.abs().max(),
                    k_residual_as_printed: (&k - &printed).abs().max() / printed.abs().max(),
                    u_residual,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in rows {
        all.extend(r?);
    }
    let max = |f: fn(&OracleRow) -> f64| all.iter().map(f).fold(0.0, f64::max);
    Ok(OracleSummary {
        n,
        max_k_residual: max(|r| r.k_residual),
        max_k_residual_as_printed: max(|r| r.k_residual_as_printed),
        max_u_residual: max(|r| r.u_residual),
        rows: all,
    })
}

/// Point-source sample at a random base in `[−1, 1]^n` with a uniformly
/// random direction.
pub fn random_ray(model: &HamiltonianModel, rng: &mut ChaCha8Rng, index: usize) -> Result<SourceSample> {
    let n = model.dim();
    let base: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let angles = match n {
        2 => vec![rng.random_range(0.0..std::f64::consts::TAU)],
        3 => vec![
            rng.random_range(-1.0_f64..1.0).acos(),
            rng.random_range(0.0..std::f64::consts::TAU),
        ],
        _ => return Err(Error::Unsupported(format!("random rays need n ∈ {{2, 3}}, got {n}"))),
    };
    make_sample(model, &SourceSpec::Point { base }, index, &angles)
}

fn unit(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    let v = DVector::from_fn(len, |_, _| rng.random_range(-1.0..1.0));
    let norm = v.norm();
    v / norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayCheck {
    pub ray: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayCheckSummary {
    pub rays: Vec<RayCheck>,
    pub max_residual: f64,
}

fn summarize(rays: Vec<Result<RayCheck>>) -> Result<RayCheckSummary> {
    let rays: Vec<RayCheck> = rays.into_iter().collect::<Result<_>>()?;
    let max_residual = rays.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(RayCheckSummary { rays, max_residual })
}

/// `|σ(R(t)a, R(t)b) − σ(a, b)|` over `t ∈ [0, t_max]` for random unit
/// tangent pairs along random rays.
pub fn symplectic_invariance(model: &HamiltonianModel, rays: usize, t_max: f64, steps: usize, seed: u64, tol: f64) -> Result<RayCheckSummary> {
    let n = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(SourceSample, DVector<f64>, DVector<f64>)> = (0..rays)
        .map(|i| {
            let s = random_ray(model, &mut rng, i)?;
            let a = unit(&mut rng, 2 * n);
            let b = unit(&mut rng, 2 * n);
            Ok((s, a, b))
        })
        .collect::<Result<_>>()?;
    let times: Vec<f64> = (0..=steps).map(|k| t_max * k as f64 / steps as f64).collect();
    let checks = inputs
        .par_iter()
        .map(|(s, a, b)| {
            let sigma0 = symplectic_form_stacked(a.as_slice(), b.as_slice());
            let rs = fundamental_matrices(model, s.chart, &s.start(), &times, tol)?;
            let residual = rs
                .iter()
                .map(|(_, _, r)| {
                    let (ra, rb) = (r * a, r * b);
                    (symplectic_form_stacked(ra.as_slice(), rb.as_slice()) - sigma0).abs()
                })
                .fold(0.0, f64::max);
            Ok(RayCheck { ray: s.index, residual })
        })
        .collect();
    summarize(checks)
}

/// End position of a flow in `chart`.
fn end_position(model: &HamiltonianModel, chart: usize, s: &SourceSample, p0: &DVector<f64>, t: f64, tol: f64) -> Result<DVector<f64>> {
    let start = crate::hamiltonian::PhasePoint::new(s.x.clone(), p0.clone());
    let prop = Propagation::run(model, s.chart, &start, None, 0.0, t, tol);
    if !prop.completed() {
        return Err(Error::Propagation {
            t: prop.t_last(),
            reason: format!("{:?}", prop.solution.outcome),
        });
    }
    let (pt, c, _, _) = prop.grid_state(prop.solution.t.len() - 1);
    Ok(if c == chart { pt.x } else { atlas::invert(&pt.x) })
}

/// Position block of the vertical frame propagated along random rays,
/// against central differences of the end position in the initial covector.
pub fn dexp_cross_check(model: &HamiltonianModel, rays: usize, t_range: (f64, f64), seed: u64, tol: f64) -> Result<RayCheckSummary> {
    let n = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(SourceSample, f64)> = (0..rays)
        .map(|i| Ok((random_ray(model, &mut rng, i)?, rng.random_range(t_range.0..t_range.1))))
        .collect::<Result<_>>()?;
    let checks = inputs
        .par_iter()
        .map(|(s, t)| {
            let rs = fundamental_matrices(model, s.chart, &s.start(), &[*t], tol)?;
            let (_, chart, r) = &rs[0];
            let hblock = r.view((0, n), (n, n)).into_owned();
            let eps = 1e-5 * s.p0.norm();
            let mut fd = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut e = DVector::zeros(n);
                e[i] = eps;
                let xp = end_position(model, *chart, s, &(&s.p0 + &e), *t, tol)?;
                let xm = end_position(model, *chart, s, &(&s.p0 - &e), *t, tol)?;
                fd.set_column(i, &((xp - xm) / (2.0 * eps)));
            }
            Ok(RayCheck {
                ray: s.index,
                residual: (&hblock - &fd).abs().max() / fd.abs().max(),
            })
        })
        .collect();
    summarize(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equator_oracle_small_grid() {
        let s = equator_oracle(2, 3, 0.1, std::f64::consts::PI - 0.1, 4, 1e-12).unwrap();
        assert_eq!(s.rows.len(), 12);
        assert!(s.max_k_residual < 1e-9, "{}", s.max_k_residual);
        assert!(s.max_k_residual_as_printed > 0.1);
        assert!(s.max_u_residual < 1e-8);
    }

    #[test]
    fn flat_flow_preserves_symplectic_form_exactly() {
        let m = crate::hamiltonian::catalog::euclidean_eikonal(2);
        let s = symplectic_invariance(&m, 3, 2.0, 4, 7, 1e-10).unwrap();
        assert!(s.max_residual < 1e-12);
    }

    #[test]
    fn dexp_matches_finite_differences_on_sphere() {
        let m = round_model(2);
        let s = dexp_cross_check(&m, 4, (0.3, 2.5), 11, 1e-12).unwrap();
        assert!(s.max_residual < 1e-4, "{}", s.max_residual);
    }
}
