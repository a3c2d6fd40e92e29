//! Sources of characteristics: a parametrized hypersurface patch with
//! `u = 0`, or a single point.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{flow, HamiltonianModel, PhasePoint};
use crate::linearized::LagrangianFrame;

/// Parametrization of a hypersurface patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "chart", rename_all = "kebab-case")]
pub enum SurfaceChart {
    /// `origin + Σ u_i τ_i`; the normal `ν` makes `det[ν, τ_1, …]` positive.
    Hyperplane { origin: Vec<f64>, tangents: Vec<Vec<f64>> },
    /// Circle `center + radius (cos u, sin u)` in the plane; `ν` points outward.
    Circle { center: Vec<f64>, radius: f64 },
    /// The full great sphere `{y₁ = 0}` of the stereographic chart, by polar
    /// angle from the south pole (and azimuth for n = 3); `ν = e₁`. Points
    /// with chart radius above 1 are placed in the inverted chart.
    GreatSphere { dim: usize },
}

/// Position, tangents and unit normal at a parameter, in one chart.
#[derive(Debug, Clone)]
pub struct SurfacePoint {
    pub chart: usize,
    pub x: DVector<f64>,
    pub tangents: DMatrix<f64>,
    pub normal: DVector<f64>,
}

fn hyperplane_normal(tangents: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = tangents.nrows();
    // Cofactor expansion of det[e_i, τ_1, …, τ_{n−1}].
    let nu = DVector::from_fn(n, |i, _| {
        let mut m = DMatrix::zeros(n, n);
        m[(i, 0)] = 1.0;
        m.view_mut((0, 1), (n, n - 1)).copy_from(tangents);
        m.determinant()
    });
    let norm = nu.norm();
    if !(norm > 1e-12) {
        return Err(Error::DegenerateFrame("hyperplane tangents are linearly dependent".into()));
    }
    Ok(nu / norm)
}

impl SurfaceChart {
    pub fn dim(&self) -> usize {
        match self {
            SurfaceChart::Hyperplane { origin, .. } => origin.len(),
            SurfaceChart::Circle { .. } => 2,
            SurfaceChart::GreatSphere { dim } => *dim,
        }
    }

    /// Chart in which the point of parameter `u` is represented.
    pub fn preferred_chart(&self, u: &[f64]) -> usize {
        match self {
            SurfaceChart::GreatSphere { .. } => {
                if (u[0] / 2.0).tan().abs() > 1.0 {
                    1
                } else {
                    0
                }
            }
            _ => 0,
        }
    }

    pub fn point_in(&self, u: &[f64], chart: usize) -> Result<SurfacePoint> {
        match self {
            SurfaceChart::Hyperplane { origin, tangents } => {
                let n = origin.len();
                if tangents.len() + 1 != n || tangents.iter().any(|t| t.len() != n) || u.len() + 1 != n {
                    return Err(Error::Config("hyperplane needs n − 1 tangents of length n".into()));
                }
                let tan = DMatrix::from_fn(n, n - 1, |i, j| tangents[j][i]);
                let x = DVector::from_row_slice(origin) + &tan * DVector::from_row_slice(u);
                let normal = hyperplane_normal(&tan)?;
                Ok(SurfacePoint {
                    chart: 0,
                    x,
                    tangents: tan,
                    normal,
                })
            }
            SurfaceChart::Circle { center, radius } => {
                if center.len() != 2 || u.len() != 1 {
                    return Err(Error::Config("circle sources live in the plane".into()));
                }
                let (s, c) = u[0].sin_cos();
                Ok(SurfacePoint {
                    chart: 0,
                    x: DVector::from_row_slice(&[center[0] + radius * c, center[1] + radius * s]),
                    tangents: DMatrix::from_column_slice(2, 1, &[-radius * s, radius * c]),
                    normal: DVector::from_row_slice(&[c, s]),
                })
            }
            SurfaceChart::GreatSphere { dim } => great_sphere_point(*dim, u, chart),
        }
    }

    pub fn point(&self, u: &[f64]) -> Result<SurfacePoint> {
        self.point_in(u, self.preferred_chart(u))
    }
}

fn great_sphere_point(n: usize, u: &[f64], chart: usize) -> Result<SurfacePoint> {
    if u.len() + 1 != n || !(2..=3).contains(&n) {
        return Err(Error::Unsupported(format!("great-sphere sources need n ∈ {{2, 3}}, got n = {n}")));
    }
    let half = u[0] / 2.0;
    // radial coordinate and its derivative in the polar angle
    let (rho, drho) = if chart == 0 {
        (half.tan(), 0.5 / half.cos().powi(2))
    } else {
        (1.0 / half.tan(), -0.5 / half.sin().powi(2))
    };
    let mut x = DVector::zeros(n);
    let mut tangents = DMatrix::zeros(n, n - 1);
    if n == 2 {
        x[1] = rho;
        tangents[(1, 0)] = drho;
    } else {
        let (s, c) = u[1].sin_cos();
        x[1] = rho * c;
        x[2] = rho * s;
        tangents[(1, 0)] = drho * c;
        tangents[(2, 0)] = drho * s;
        tangents[(1, 1)] = -rho * s;
        tangents[(2, 1)] = rho * c;
    }
    let mut normal = DVector::zeros(n);
    normal[0] = 1.0;
    Ok(SurfacePoint {
        chart,
        x,
        tangents,
        normal,
    })
}

/// Parameter box of a hypersurface patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Periodic axes are sampled without their upper endpoint.
    #[serde(default)]
    pub periodic: Vec<bool>,
}

impl ParamBox {
    pub fn is_periodic(&self, axis: usize) -> bool {
        self.periodic.get(axis).copied().unwrap_or(false)
    }

    /// Tensor grid with `resolution` points per axis, first axis slowest.
    pub fn grid(&self, resolution: usize) -> Result<Vec<Vec<f64>>> {
        if resolution < 2 {
            return Err(Error::Config("resolution must be at least 2 per axis".into()));
        }
        if self.lower.len() != self.upper.len() {
            return Err(Error::Config("parameter box bounds differ in length".into()));
        }
        let axes: Vec<Vec<f64>> = (0..self.lower.len())
            .map(|a| {
                let (lo, hi) = (self.lower[a], self.upper[a]);
                let denom = if self.is_periodic(a) { resolution } else { resolution - 1 } as f64;
                (0..resolution).map(|k| lo + (hi - lo) * k as f64 / denom).collect()
            })
            .collect();
        let total = resolution.pow(axes.len() as u32);
        Ok((0..total)
            .map(|idx| {
                let mut rem = idx;
                let mut p = vec![0.0; axes.len()];
                for a in (0..axes.len()).rev() {
                    p[a] = axes[a][rem % resolution];
                    rem /= resolution;
                }
                p
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceSpec {
    Hypersurface {
        #[serde(flatten)]
        chart: SurfaceChart,
        #[serde(rename = "box")]
        param_box: ParamBox,
        /// `+1` when characteristics leave along the normal, `−1` against it.
        orientation: f64,
    },
    Point {
        base: Vec<f64>,
    },
}

impl SourceSpec {
    pub fn is_point(&self) -> bool {
        matches!(self, SourceSpec::Point { .. })
    }

    /// Mesh parameters; for point sources these are direction angles.
    pub fn parameters(&self, n: usize, resolution: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            SourceSpec::Hypersurface { param_box, .. } => param_box.grid(resolution),
            SourceSpec::Point { .. } => direction_box(n).grid(resolution),
        }
    }

    /// Whether mesh axis `axis` wraps around.
    pub fn periodic_axes(&self, n: usize) -> Vec<bool> {
        let b = self.parameter_box(n);
        (0..b.lower.len()).map(|a| b.is_periodic(a)).collect()
    }

    /// Parameter box of the mesh; direction angles for point sources.
    pub fn parameter_box(&self, n: usize) -> ParamBox {
        match self {
            SourceSpec::Hypersurface { param_box, .. } => param_box.clone(),
            SourceSpec::Point { .. } => direction_box(n),
        }
    }
}

/// Angles of the direction mesh: `[0, 2π)` in the plane, polar `[0, π]`
/// times azimuth `[0, 2π)` in space.
pub fn direction_box(n: usize) -> ParamBox {
    if n == 2 {
        ParamBox {
            lower: vec![0.0],
            upper: vec![2.0 * PI],
            periodic: vec![true],
        }
    } else {
        ParamBox {
            lower: vec![0.0, 0.0],
            upper: vec![PI, 2.0 * PI],
            periodic: vec![false, true],
        }
    }
}

/// Unit vector for direction angles.
pub fn direction(n: usize, angles: &[f64]) -> Result<DVector<f64>> {
    match (n, angles.len()) {
        (2, 1) => Ok(DVector::from_row_slice(&[angles[0].cos(), angles[0].sin()])),
        (3, 2) => {
            let (st, ct) = angles[0].sin_cos();
            let (sp, cp) = angles[1].sin_cos();
            Ok(DVector::from_row_slice(&[st * cp, st * sp, ct]))
        }
        _ => Err(Error::Unsupported(format!("point-source direction meshes need n ∈ {{2, 3}}, got {n}"))),
    }
}

/// One source point with its covector and initial frame.
#[derive(Debug, Clone)]
pub struct SourceSample {
    pub index: usize,
    pub parameter: Vec<f64>,
    pub chart: usize,
    pub x: DVector<f64>,
    pub p0: DVector<f64>,
    pub frame: LagrangianFrame,
    /// `⟨∂H/∂p, ν⟩` at the start (hypersurfaces), or the speed `|∂H/∂p|` (points).
    pub conormal_speed: f64,
    /// Unit direction in model-orthonormal coordinates (point sources).
    pub direction: Option<DVector<f64>>,
}

impl SourceSample {
    pub fn start(&self) -> PhasePoint {
        PhasePoint::new(self.x.clone(), self.p0.clone())
    }
}

/// Solves `H(x, s m) = level` for `s` of sign `sign`.
fn ray_root(model: &HamiltonianModel, chart: usize, x: &DVector<f64>, m: &DVector<f64>, sign: f64) -> Result<f64> {
    let h = model.chart(chart);
    let level = model.level();
    let g = |s: f64| h.value(x, &(m * s)) - level;
    let g0 = g(0.0);
    if !(g0 < 0.0) {
        return Err(Error::SourceNotAdmissible(format!("H(x, 0) − level = {g0:.3e} is not negative")));
    }
    let mut hi = sign;
    let mut lo = 0.0;
    let mut k = 0;
    while g(hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        k += 1;
        if k > 80 || !hi.is_finite() {
            return Err(Error::SourceNotAdmissible("H stays below the level along the conormal line".into()));
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = if g(lo).abs() <= g(hi).abs() { lo } else { hi };
    let residual = g(s).abs();
    if residual > 1e-12 * (1.0 + level.abs()) {
        return Err(Error::SourceNotAdmissible(format!("covector residual {residual:.3e}")));
    }
    Ok(s)
}

/// Inward covector `du(x)` on a hypersurface source at parameter `u`.
pub fn boundary_covector(model: &HamiltonianModel, source: &SourceSpec, u: &[f64]) -> Result<DVector<f64>> {
    let SourceSpec::Hypersurface { chart, orientation, .. } = source else {
        return Err(Error::InvalidInput("boundary covectors exist only for hypersurface sources".into()));
    };
    let pt = chart.point(u)?;
    covector_at(model, &pt, *orientation)
}

fn covector_at(model: &HamiltonianModel, pt: &SurfacePoint, orientation: f64) -> Result<DVector<f64>> {
    if pt.x.len() != model.dim() {
        return Err(Error::Config(format!(
            "source dimension {} differs from model dimension {}",
            pt.x.len(),
            model.dim()
        )));
    }
    let sign = if orientation >= 0.0 { 1.0 } else { -1.0 };
    let s = ray_root(model, pt.chart, &pt.x, &pt.normal, sign)?;
    Ok(&pt.normal * s)
}

/// Initial frame: the tangent space to the graph of `du` over the source
/// extended by the Hamiltonian direction, or the vertical space at a point.
pub fn initial_lagrangian(model: &HamiltonianModel, source: &SourceSpec, u: &[f64]) -> Result<LagrangianFrame> {
    Ok(make_sample(model, source, 0, u)?.frame)
}

fn richardson_covector_derivative(
    model: &HamiltonianModel,
    chart: &SurfaceChart,
    in_chart: usize,
    orientation: f64,
    u: &[f64],
    axis: usize,
) -> Result<DVector<f64>> {
    let at = |delta: f64| -> Result<DVector<f64>> {
        let mut w = u.to_vec();
        w[axis] += delta;
        covector_at(model, &chart.point_in(&w, in_chart)?, orientation)
    };
    let central = |h: f64| -> Result<DVector<f64>> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    let h = 1e-3;
    let d1 = central(h)?;
    let d2 = central(h / 2.0)?;
    Ok((d2 * 4.0 - d1) / 3.0)
}

/// Builds the full sample for parameter `u`.
pub fn make_sample(model: &HamiltonianModel, source: &SourceSpec, index: usize, u: &[f64]) -> Result<SourceSample> {
    let n = model.dim();
    match source {
        SourceSpec::Hypersurface { chart, orientation, .. } => {
            let pt = chart.point(u)?;
            let p0 = covector_at(model, &pt, *orientation)?;
            let h = model.chart(pt.chart);
            let hp = h.grad_p(&pt.x, &p0);
            let hx = h.grad_x(&pt.x, &p0);
            let mut cols = DMatrix::zeros(2 * n, n);
            for i in 0..n - 1 {
                let dp = richardson_covector_derivative(model, chart, pt.chart, *orientation, u, i)?;
                cols.view_mut((0, i), (n, 1)).copy_from(&pt.tangents.column(i));
                cols.view_mut((n, i), (n, 1)).copy_from(&dp);
            }
            cols.view_mut((0, n - 1), (n, 1)).copy_from(&hp);
            cols.view_mut((n, n - 1), (n, 1)).copy_from(&(-hx));
            let frame = LagrangianFrame::certified(cols, 1e-8)?;
            Ok(SourceSample {
                index,
                parameter: u.to_vec(),
                chart: pt.chart,
                conormal_speed: hp.dot(&pt.normal),
                x: pt.x,
                p0,
                frame,
                direction: None,
            })
        }
        SourceSpec::Point { base } => {
            if base.len() != n {
                return Err(Error::Config(format!("point source has dimension {}, model {n}", base.len())));
            }
            let x = DVector::from_row_slice(base);
            let d = direction(n, u)?;
            let q0 = model.hessians(&x, &DVector::zeros(n)).q;
            let eig = SymmetricEigen::new((&q0 + q0.transpose()) * 0.5);
            if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::SourceNotAdmissible("d²H/dp² is not positive definite at the point".into()));
            }
            let inv_sqrt = &eig.eigenvectors
                * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
                * eig.eigenvectors.transpose();
            let m = &inv_sqrt * &d;
            let s = ray_root(model, 0, &x, &m, 1.0)?;
            let p0 = m * s;
            let speed = model.grad_p(&x, &p0).norm();
            Ok(SourceSample {
                index,
                parameter: u.to_vec(),
                chart: 0,
                x,
                p0,
                frame: LagrangianFrame::vertical(n),
                conormal_speed: speed,
                direction: Some(d),
            })
        }
    }
}

/// `π ∘ φ_t(x, du(x))` in the primary chart.
pub fn exp_map(model: &HamiltonianModel, sample: &SourceSample, t: f64) -> Result<DVector<f64>> {
    if t == 0.0 {
        return Ok(model.position_to_primary(sample.chart, &sample.x));
    }
    let start = model.to_primary(sample.chart, &sample.x, &sample.p0);
    let tol = 1e-11;
    match flow(model, &start, t, tol) {
        Ok(traj) => Ok(model.position_to_primary(traj.end_chart(), &traj.end().x)),
        Err(Error::Escaped { t_last }) => Err(Error::BeyondMaximalTime {
            t_last,
            t_requested: t,
        }),
        Err(e) => Err(e),
    }
}

/// A mesh entry; failed samples stay in the mesh with their error message.
#[derive(Debug, Clone)]
pub struct MeshEntry {
    pub index: usize,
    pub parameter: Vec<f64>,
    pub sample: std::result::Result<SourceSample, String>,
}

pub fn source_mesh(model: &HamiltonianModel, source: &SourceSpec, resolution: usize) -> Result<Vec<MeshEntry>> {
    let params = source.parameters(model.dim(), resolution)?;
    Ok(params
        .into_par_iter()
        .enumerate()
        .map(|(index, parameter)| {
            let sample = make_sample(model, source, index, &parameter).map_err(|e| e.to_string());
            MeshEntry {
                index,
                parameter,
                sample,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::catalog::euclidean_eikonal;
    use crate::linearized::{extract_k, SVD_TOL};
    use crate::sphere::{closed_form_u, round_model};

    fn equator(n: usize) -> SourceSpec {
        let tangents = (1..n)
            .map(|i| {
                let mut t = vec![0.0; n];
                t[i] = 1.0;
                t
            })
            .collect();
        SourceSpec::Hypersurface {
            chart: SurfaceChart::Hyperplane {
                origin: vec![0.0; n],
                tangents,
            },
            param_box: ParamBox {
                lower: vec![-1.0; n - 1],
                upper: vec![1.0; n - 1],
                periodic: vec![],
            },
            orientation: 1.0,
        }
    }

    #[test]
    fn flat_source_covector_and_frame() {
        let model = euclidean_eikonal(3);
        let src = equator(3);
        let p = boundary_covector(&model, &src, &[0.3, -0.2]).unwrap();
        assert!((p - DVector::from_row_slice(&[1.0, 0.0, 0.0])).norm() < 1e-12);
        let f = initial_lagrangian(&model, &src, &[0.3, -0.2]).unwrap();
        assert!(extract_k(&f, SVD_TOL).matrix().unwrap().abs().max() < 1e-9);
    }

    #[test]
    fn sphere_equator_covector() {
        let model = round_model(3);
        let z = [0.0, 0.5, -0.25];
        let p = boundary_covector(&model, &equator(3), &z[1..]).unwrap();
        let r = 1.0 + 0.25 + 0.0625;
        assert!((p - DVector::from_row_slice(&[2.0 / r, 0.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn circle_inward_covector() {
        let model = euclidean_eikonal(2);
        let src = SourceSpec::Hypersurface {
            chart: SurfaceChart::Circle {
                center: vec![0.0, 0.0],
                radius: 1.0,
            },
            param_box: ParamBox {
                lower: vec![0.0],
                upper: vec![2.0 * PI],
                periodic: vec![true],
            },
            orientation: -1.0,
        };
        let p = boundary_covector(&model, &src, &[0.0]).unwrap();
        assert!((p - DVector::from_row_slice(&[-1.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn inadmissible_source_is_reported() {
        let model = crate::hamiltonian::catalog::quadratic(DMatrix::identity(2, 2), -1.0);
        let err = boundary_covector(&model, &equator(2), &[0.0]).unwrap_err();
        assert!(matches!(err, Error::SourceNotAdmissible(_)));
    }

    #[test]
    fn sphere_initial_frame_matches_closed_form_u() {
        let model = round_model(2);
        for z2 in [-1.0, -0.5, 0.0, 0.25, 1.0] {
            let s = make_sample(&model, &equator(2), 0, &[z2]).unwrap();
            assert!(s.frame.isotropy_residual < 1e-10);
            let u = extract_k(&s.frame, SVD_TOL).matrix().unwrap().clone();
            assert!((u - closed_form_u(&[0.0, z2])).abs().max() < 1e-8, "z2 = {z2}");
            assert!(s.conormal_speed > 0.0);
        }
    }

    #[test]
    fn mesh_parameters() {
        let src = SourceSpec::Hypersurface {
            chart: SurfaceChart::Hyperplane {
                origin: vec![0.0, 0.0],
                tangents: vec![vec![0.0, 1.0]],
            },
            param_box: ParamBox {
                lower: vec![0.0],
                upper: vec![1.0],
                periodic: vec![],
            },
            orientation: 1.0,
        };
        let p = src.parameters(2, 5).unwrap();
        assert_eq!(p, vec![vec![0.0], vec![0.25], vec![0.5], vec![0.75], vec![1.0]]);
        assert!(src.parameters(2, 1).is_err());

        let model = round_model(2);
        let mesh = source_mesh(&model, &equator(2), 3).unwrap();
        let zs: Vec<f64> = mesh.iter().map(|m| m.sample.as_ref().unwrap().x[1]).collect();
        assert_eq!(zs, vec![-1.0, 0.0, 1.0]);
        for m in &mesh {
            let s = m.sample.as_ref().unwrap();
            let r = 1.0 + s.x.norm_squared();
            assert!((s.p0[0] - 2.0 / r).abs() < 1e-12);
        }
    }

    #[test]
    fn point_source_samples_lie_on_the_level_set() {
        let model = round_model(2);
        let src = SourceSpec::Point { base: vec![-1.0, 0.0] };
        let mesh = source_mesh(&model, &src, 12).unwrap();
        assert_eq!(mesh.len(), 12);
        for m in &mesh {
            let s = m.sample.as_ref().unwrap();
            assert!((model.value(&s.x, &s.p0) - 0.5).abs() < 1e-12);
            assert_eq!(s.frame, LagrangianFrame::vertical(2));
        }
    }

    #[test]
    fn great_sphere_samples_switch_chart_far_out() {
        let model = round_model(2);
        let src = SourceSpec::Hypersurface {
            chart: SurfaceChart::GreatSphere { dim: 2 },
            param_box: ParamBox {
                lower: vec![-PI],
                upper: vec![PI],
                periodic: vec![true],
            },
            orientation: 1.0,
        };
        let s = make_sample(&model, &src, 0, &[-PI]).unwrap();
        assert_eq!(s.chart, 1);
        assert!(s.x.norm() < 1e-12);
        // in the inverted chart the equator point at infinity has p = (2, 0)
        assert!((s.p0.clone() - DVector::from_row_slice(&[2.0, 0.0])).norm() < 1e-12);
        let s = make_sample(&model, &src, 0, &[0.5]).unwrap();
        assert_eq!(s.chart, 0);
        let u = extract_k(&s.frame, SVD_TOL).matrix().unwrap().clone();
        assert!((u - closed_form_u(&[0.0, 0.25_f64.tan()])).abs().max() < 1e-8);
    }

    #[test]
    fn exp_map_examples() {
        let model = euclidean_eikonal(2);
        let s = make_sample(&model, &equator(2), 0, &[0.4]).unwrap();
        assert_eq!(exp_map(&model, &s, 0.0).unwrap(), s.x);
        assert!((exp_map(&model, &s, 2.0).unwrap() - DVector::from_row_slice(&[2.0, 0.4])).norm() < 1e-12);

        let sphere = round_model(2);
        let s = make_sample(&sphere, &equator(2), 0, &[0.0]).unwrap();
        let y = exp_map(&sphere, &s, std::f64::consts::FRAC_PI_2).unwrap();
        assert!((y - DVector::from_row_slice(&[1.0, 0.0])).norm() < 1e-9);
    }
}
