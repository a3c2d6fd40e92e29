//! Empirical regularity of sampled functions (Lipschitz and semiconcavity
//! constants, second-difference bounds) and convexity certificates for
//! nonfocal domains.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianModel;
use crate::loci::{conjugate_time, ConjugateOptions};
use crate::source::{source_mesh, SourceSpec};

/// Values at scattered points; axes with a period wrap around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledFunction {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub periods: Vec<Option<f64>>,
}

impl SampledFunction {
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (&self.points[a], &self.points[b]);
        let mut s = 0.0;
        for k in 0..pa.len() {
            let mut d = (pa[k] - pb[k]).abs();
            if let Some(Some(per)) = self.periods.get(k) {
                d %= per;
                d = d.min(per - d);
            }
            s += d * d;
        }
        s.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub radius: f64,
    pub value: f64,
    pub pairs: usize,
    pub witness: (usize, usize),
}

/// Largest difference quotient over pairs of finite samples within `radius`.
pub fn lipschitz_estimate(f: &SampledFunction, radius: f64) -> Result<LipschitzEstimate> {
    if f.points.len() != f.values.len() {
        return Err(Error::InvalidInput("points and values differ in length".into()));
    }
    let n = f.points.len();
    let per_row: Vec<(f64, usize, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, i, i);
            let mut count = 0;
            if !f.values[i].is_finite() {
                return (best.0, 0, i);
            }
            for j in i + 1..n {
                if !f.values[j].is_finite() {
                    continue;
                }
                let d = f.distance(i, j);
                if d > 0.0 && d <= radius {
                    count += 1;
                    let q = (f.values[i] - f.values[j]).abs() / d;
                    if q > best.0 {
                        best = (q, i, j);
                    }
                }
            }
            (best.0, count, best.2)
        })
        .collect();
    let pairs: usize = per_row.iter().map(|r| r.1).sum();
    if pairs == 0 {
        return Err(Error::NoAdmissiblePair(radius));
    }
    let (i, &(value, _, j)) = per_row
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1 > 0)
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.0.cmp(&a.0)))
        .expect("some row has pairs");
    Ok(LipschitzEstimate {
        radius,
        value,
        pairs,
        witness: (i, j),
    })
}

/// Values on a regular grid (first axis slowest); `NaN` marks missing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub lower: Vec<f64>,
    pub spacing: Vec<f64>,
    pub shape: Vec<usize>,
    pub periodic: Vec<bool>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn from_fn(lower: Vec<f64>, spacing: Vec<f64>, shape: Vec<usize>, periodic: Vec<bool>, f: impl Fn(&[f64]) -> f64) -> Self {
        let total: usize = shape.iter().product();
        let mut g = Self {
            lower,
            spacing,
            shape,
            periodic,
            values: Vec::with_capacity(total),
        };
        for i in 0..total {
            let x = g.coordinates(&g.multi_index(i));
            g.values.push(f(&x));
        }
        g
    }

    /// Values over a source mesh of `resolution` points per axis.
    pub fn on_source_mesh(source: &SourceSpec, n: usize, resolution: usize, values: Vec<f64>) -> Self {
        let b = source.parameter_box(n);
        let axes = b.lower.len();
        Self {
            spacing: (0..axes)
                .map(|a| {
                    let cells = if b.is_periodic(a) { resolution } else { resolution - 1 };
                    (b.upper[a] - b.lower[a]) / cells as f64
                })
                .collect(),
            shape: vec![resolution; axes],
            periodic: (0..axes).map(|a| b.is_periodic(a)).collect(),
            lower: b.lower,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut m = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            m[a] = flat % self.shape[a];
            flat /= self.shape[a];
        }
        m
    }

    pub fn coordinates(&self, m: &[usize]) -> Vec<f64> {
        m.iter().enumerate().map(|(a, &i)| self.lower[a] + self.spacing[a] * i as f64).collect()
    }

    /// Flat index of `m + offset`, wrapping periodic axes.
    fn shifted(&self, m: &[usize], offset: &[i64]) -> Option<usize> {
        let mut flat = 0;
        for a in 0..self.dim() {
            let len = self.shape[a] as i64;
            let mut k = m[a] as i64 + offset[a];
            if self.periodic[a] {
                k = k.rem_euclid(len);
            } else if k < 0 || k >= len {
                return None;
            }
            flat = flat * self.shape[a] + k as usize;
        }
        Some(flat)
    }

    fn check(&self, min_points: usize) -> Result<()> {
        let total: usize = self.shape.iter().product();
        let dims_agree = self.lower.len() == self.dim() && self.spacing.len() == self.dim() && self.periodic.len() == self.dim();
        if self.dim() == 0 || !dims_agree || self.values.len() != total {
            return Err(Error::DegenerateMesh("grid dimensions and values disagree".into()));
        }
        if self.spacing.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::DegenerateMesh("grid spacing must be positive".into()));
        }
        if let Some(a) = self.shape.iter().position(|&s| s < min_points) {
            return Err(Error::DegenerateMesh(format!(
                "axis {a} has {} points, at least {min_points} needed",
                self.shape[a]
            )));
        }
        Ok(())
    }

    /// Integer offsets with physical length in `(0, radius]`, one of each `±` pair.
    fn offsets(&self, radius: f64) -> Vec<Vec<i64>> {
        let reach: Vec<i64> = self
            .spacing
            .iter()
            .zip(&self.shape)
            .zip(&self.periodic)
            .map(|((h, &s), &per)| {
                let r = (radius / h).floor() as i64;
                if per { r.min(s as i64 / 2 - 1) } else { r.min(s as i64 - 1) }
            })
            .collect();
        let mut out = Vec::new();
        let mut cur: Vec<i64> = reach.iter().map(|r| -r).collect();
        loop {
            let positive = cur.iter().find(|&&k| k != 0).is_some_and(|&k| k > 0);
            if positive && self.length(&cur) <= radius * (1.0 + 1e-12) {
                out.push(cur.clone());
            }
            let mut a = self.dim();
            loop {
                if a == 0 {
                    return out;
                }
                a -= 1;
                if cur[a] < reach[a] {
                    cur[a] += 1;
                    break;
                }
                cur[a] = -reach[a];
            }
        }
    }

    fn length(&self, offset: &[i64]) -> f64 {
        offset.iter().zip(&self.spacing).map(|(&k, h)| (k as f64 * h).powi(2)).sum::<f64>().sqrt()
    }
}

/// Worst triple `μ f(x) + (1−μ) f(y) − f(μx + (1−μ)y)` relative to
/// `μ(1−μ)|x − y|²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityWitness {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub mu: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityEstimate {
    pub delta: f64,
    /// Smallest `C ≥ 0` satisfying every sampled triple.
    pub c: f64,
    /// `C` grows like a negative power of `|x − y|` at the smallest scales.
    pub infinite: bool,
    /// Log-log slope of the per-scale constant over the three smallest scales.
    pub slope: Option<f64>,
    /// `(|x − y|, C)` per distinct separation.
    pub by_scale: Vec<(f64, f64)>,
    pub triples: usize,
    pub witness: Option<SemiconcavityWitness>,
}

const MUS: [(f64, i64); 3] = [(0.5, 2), (0.25, 4), (0.75, 4)];

/// Slope at or below which the smallest scales indicate an unbounded constant.
const BLOWUP_SLOPE: f64 = -0.8;

/// Semiconcavity constant over all grid triples with `|x − y| ≤ delta` and
/// `μ ∈ {½, ¼, ¾}` whose interpolated point is a grid node.
pub fn semiconcavity_estimate(f: &GridFunction, delta: f64) -> Result<SemiconcavityEstimate> {
    f.check(3)?;
    let offsets = f.offsets(delta);
    let total = f.values.len();
    // Per offset: (worst ratio, witness, triples).
    let per_offset: Vec<(f64, Option<SemiconcavityWitness>, usize)> = offsets
        .par_iter()
        .map(|o| {
            let len2 = f.length(o).powi(2);
            let mut worst = 0.0_f64;
            let mut witness = None;
            let mut count = 0;
            for &(mu, div) in &MUS {
                if o.iter().any(|k| k % div != 0) {
                    continue;
                }
                let step: Vec<i64> = o.iter().map(|k| k / div * (div - (mu * div as f64).round() as i64)).collect();
                for xi in 0..total {
                    let fx = f.values[xi];
                    if !fx.is_finite() {
                        continue;
                    }
                    let mx = f.multi_index(xi);
                    let (Some(yi), Some(zi)) = (f.shifted(&mx, o), f.shifted(&mx, &step)) else {
                        continue;
                    };
                    let (fy, fz) = (f.values[yi], f.values[zi]);
                    if !(fy.is_finite() && fz.is_finite()) {
                        continue;
                    }
                    count += 1;
                    let ratio = (mu * fx + (1.0 - mu) * fy - fz) / (mu * (1.0 - mu) * len2);
                    if ratio > worst {
                        worst = ratio;
                        witness = Some(SemiconcavityWitness {
                            x: mx,
                            y: f.multi_index(yi),
                            mu,
                            ratio,
                        });
                    }
                }
            }
            (worst, witness, count)
        })
        .collect();
    let triples: usize = per_offset.iter().map(|r| r.2).sum();
    if triples == 0 {
        return Err(Error::DegenerateMesh(format!("no triples within δ = {delta}")));
    }
    let mut scales: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut best: (f64, Option<SemiconcavityWitness>) = (0.0, None);
    for (o, (c, w, count)) in offsets.iter().zip(per_offset) {
        if count == 0 {
            continue;
        }
        let len = f.length(o);
        let e = scales.entry(len.to_bits()).or_insert((len, 0.0));
        e.1 = e.1.max(c);
        if c > best.0 {
            best = (c, w);
        }
    }
    let by_scale: Vec<(f64, f64)> = scales.into_values().collect();
    let slope = (by_scale.len() >= 3 && by_scale[..3].iter().all(|s| s.1 > 0.0)).then(|| {
        let pts: Vec<(f64, f64)> = by_scale[..3].iter().map(|s| (s.0.ln(), s.1.ln())).collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(SemiconcavityEstimate {
        delta,
        c: best.0,
        infinite: slope.is_some_and(|s| s <= BLOWUP_SLOPE),
        slope,
        by_scale,
        triples,
        witness: best.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianBound {
    pub value: f64,
    pub witness: Vec<usize>,
    pub axis: usize,
}

/// Largest second-difference quotient along grid axes.
pub fn hessian_bound_estimate(f: &GridFunction) -> Result<HessianBound> {
    f.check(5)?;
    let mut best = HessianBound {
        value: 0.0,
        witness: f.multi_index(0),
        axis: 0,
    };
    let mut any = false;
    for i in 0..f.values.len() {
        let m = f.multi_index(i);
        for a in 0..f.dim() {
            let mut e = vec![0i64; f.dim()];
            e[a] = 1;
            let minus: Vec<i64> = e.iter().map(|k| -k).collect();
            let (Some(p), Some(q)) = (f.shifted(&m, &e), f.shifted(&m, &minus)) else {
                continue;
            };
            let d2 = (f.values[p] - 2.0 * f.values[i] + f.values[q]) / f.spacing[a].powi(2);
            if !d2.is_finite() {
                continue;
            }
            any = true;
            if d2.abs() > best.value {
                best = HessianBound {
                    value: d2.abs(),
                    witness: m.clone(),
                    axis: a,
                };
            }
        }
    }
    if !any {
        return Err(Error::DegenerateMesh("no interior samples with finite values".into()));
    }
    Ok(best)
}

/// `{t_conj(v) v}` over a direction mesh, in coordinates orthonormal for the
/// model's norm at the base point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonfocalDomain {
    pub base: Vec<f64>,
    pub parameters: Vec<Vec<f64>>,
    pub t_conj: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
}

impl NonfocalDomain {
    /// `t_conj` on the direction grid, for the regularity estimators.
    pub fn t_conj_grid(&self, n: usize, resolution: usize) -> GridFunction {
        let source = SourceSpec::Point { base: self.base.clone() };
        GridFunction::on_source_mesh(&source, n, resolution, self.t_conj.clone())
    }
}

pub fn nonfocal_domain(
    model: &HamiltonianModel,
    base: &[f64],
    resolution: usize,
    horizon: f64,
    opts: &ConjugateOptions,
) -> Result<NonfocalDomain> {
    let source = SourceSpec::Point { base: base.to_vec() };
    let mesh = source_mesh(model, &source, resolution)?;
    let n = model.dim();
    let x = DVector::from_row_slice(base);
    let q0 = model.hessians(&x, &DVector::zeros(n)).q;
    let eig = SymmetricEigen::new((&q0 + q0.transpose()) * 0.5);
    let inv_sqrt: DMatrix<f64> =
        &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * eig.eigenvectors.transpose();
    let rows: Vec<Result<Option<(f64, DVector<f64>)>>> = mesh
        .par_iter()
        .map(|e| {
            let s = e.sample.as_ref().map_err(|m| Error::SourceNotAdmissible(m.clone()))?;
            let c = conjugate_time(model, s, horizon, opts)?;
            let w = &inv_sqrt * model.grad_p(&s.x, &s.p0);
            Ok(c.t_conj.map(|t| (t, w)))
        })
        .collect();
    let mut missing = Vec::new();
    let mut out = NonfocalDomain {
        base: base.to_vec(),
        parameters: Vec::with_capacity(mesh.len()),
        t_conj: Vec::with_capacity(mesh.len()),
        points: Vec::with_capacity(mesh.len()),
        radii: Vec::with_capacity(mesh.len()),
    };
    for (e, row) in mesh.iter().zip(rows) {
        match row? {
            None => missing.push(e.index),
            Some((t, w)) => {
                let p = w * t;
                out.radii.push(p.norm());
                out.points.push(p.iter().copied().collect());
                out.t_conj.push(t);
                out.parameters.push(e.parameter.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingConjugate(missing));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityOptions {
    pub kappa_min: f64,
    /// Longest chord tested, as a fraction of the diameter.
    pub chord_fraction: f64,
    /// Shortest chord tested, in units of the largest sample spacing.
    pub min_chord_spacings: f64,
    /// Neighborhood radius of the ball test; defaults to the longest chord.
    pub ball_radius: Option<f64>,
}

impl Default for ConvexityOptions {
    fn default() -> Self {
        Self {
            kappa_min: 0.1,
            chord_fraction: 0.25,
            min_chord_spacings: 10.0,
            ball_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityCertificate {
    pub kappa_chord: f64,
    pub kappa_ball: f64,
    pub kappa_min: f64,
    pub pass: bool,
    pub samples: usize,
    pub max_spacing: f64,
    /// Allowance subtracted from polygon distances for sampling error.
    pub resolution_error: f64,
    pub chord_pairs: usize,
    /// `(i, j, λ)` attaining `kappa_chord`.
    pub chord_witness: Option<(usize, usize, f64)>,
    /// `(i, j)` attaining `kappa_ball`.
    pub ball_witness: Option<(usize, usize)>,
    /// SHA-256 of the sample coordinates.
    pub sample_digest: String,
}

fn seg_distance(z: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let l = if len2 > 0.0 {
        (((z[0] - a[0]) * d[0] + (z[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let w = [a[0] + l * d[0] - z[0], a[1] + l * d[1] - z[1]];
    (w[0] * w[0] + w[1] * w[1]).sqrt()
}

fn inside(z: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > z[1]) != (b[1] > z[1]) {
            let x = a[0] + (z[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if z[0] < x {
                c = !c;
            }
        }
    }
    c
}

/// Signed distance to the closed polygon, negative outside.
fn polygon_distance(z: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let d = (0..n).map(|i| seg_distance(z, poly[i], poly[(i + 1) % n])).fold(f64::INFINITY, f64::min);
    if inside(z, poly) {
        d
    } else {
        -d
    }
}

/// Circumradius of three points; infinite when collinear.
fn circumradius(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let bc = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt();
    let ca = ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt();
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    if area2 == 0.0 {
        f64::INFINITY
    } else {
        ab * bc * ca / (2.0 * area2)
    }
}

fn digest(points: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for p in points {
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Chord and enclosing-ball convexity moduli of a closed planar curve given
/// by ordered samples, star-shaped about `center`.
pub fn uniform_convexity(boundary: &[Vec<f64>], center: &[f64], opts: &ConvexityOptions) -> Result<ConvexityCertificate> {
    if center.len() != 2 || boundary.iter().any(|p| p.len() != 2) {
        return Err(Error::Unsupported("convexity certificates are implemented for planar curves".into()));
    }
    let n = boundary.len();
    if n < 8 {
        return Err(Error::DegenerateMesh(format!("{n} boundary samples, at least 8 needed")));
    }
    if boundary.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("boundary samples".into()));
    }
    let poly: Vec<[f64; 2]> = boundary.iter().map(|p| [p[0], p[1]]).collect();

    // Star-shapedness: the polar angle about the center is strictly monotone
    // and winds exactly once.
    let mut turn = Vec::with_capacity(n);
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let ta = (a[1] - center[1]).atan2(a[0] - center[0]);
        let tb = (b[1] - center[1]).atan2(b[0] - center[0]);
        let mut d = tb - ta;
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d <= -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        turn.push(d);
    }
    let orientation = if turn.iter().sum::<f64>() > 0.0 { 1.0 } else { -1.0 };
    if let Some(i) = turn.iter().position(|&d| !(d * orientation > 0.0)) {
        return Err(Error::NotStarShaped(format!("polar angle is not monotone at sample {i}")));
    }
    let winding = turn.iter().sum::<f64>() / (2.0 * std::f64::consts::PI);
    if (winding.abs() - 1.0).abs() > 1e-6 {
        return Err(Error::NotStarShaped(format!("boundary winds {winding:.3} times about the center")));
    }

    let dist = |i: usize, j: usize| ((poly[i][0] - poly[j][0]).powi(2) + (poly[i][1] - poly[j][1]).powi(2)).sqrt();
    let max_spacing = (0..n).map(|i| dist(i, (i + 1) % n)).fold(0.0, f64::max);
    let diameter = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist(i, j)).fold(0.0, f64::max);
    let resolution_error = (0..n)
        .map(|i| {
            let e = dist(i, (i + 1) % n);
            let r = circumradius(poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
            e * e / (8.0 * r)
        })
        .fold(0.0, f64::max);

    let chord_max = opts.chord_fraction * diameter;
    let chord_min = opts.min_chord_spacings * max_spacing;
    let lambdas = [0.25, 0.5, 0.75];
    let rows: Vec<(f64, Option<(usize, usize, f64)>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, None);
            let mut count = 0;
            for j in i + 1..n {
                let c = dist(i, j);
                if c < chord_min || c > chord_max {
                    continue;
                }
                count += 1;
                for &l in &lambdas {
                    let z = [
                        l * poly[i][0] + (1.0 - l) * poly[j][0],
                        l * poly[i][1] + (1.0 - l) * poly[j][1],
                    ];
                    let d = polygon_distance(z, &poly) - resolution_error;
                    let k = (d / (l * (1.0 - l) * c * c)).max(0.0);
                    if k < best.0 {
                        best = (k, Some((i, j, l)));
                    }
                }
            }
            (best.0, best.1, count)
        })
        .collect();
    let chord_pairs: usize = rows.iter().map(|r| r.2).sum();
    if chord_pairs == 0 {
        return Err(Error::DegenerateMesh(format!(
            "no chords between {chord_min:.3e} and {chord_max:.3e}; sampling is too coarse"
        )));
    }
    let (kappa_chord, chord_witness) = rows
        .iter()
        .filter(|r| r.2 > 0)
        .map(|r| (r.0, r.1))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("some chords");

    // Ball test with outward normals from centered differences.
    let delta = opts.ball_radius.unwrap_or(chord_max);
    let mut kappa_ball = f64::INFINITY;
    let mut ball_witness = None;
    for i in 0..n {
        let (a, b) = (poly[(i + n - 1) % n], poly[(i + 1) % n]);
        let t = [b[0] - a[0], b[1] - a[1]];
        let tn = (t[0] * t[0] + t[1] * t[1]).sqrt();
        let nu = [orientation * t[1] / tn, -orientation * t[0] / tn];
        for j in 0..n {
            if j == i {
                continue;
            }
            let dd = dist(i, j);
            if dd > delta {
                continue;
            }
            let d = [poly[i][0] - poly[j][0], poly[i][1] - poly[j][1]];
            let k = (2.0 * (d[0] * nu[0] + d[1] * nu[1]) / (dd * dd)).max(0.0);
            if k < kappa_ball {
                kappa_ball = k;
                ball_witness = Some((i, j));
            }
        }
    }
    if ball_witness.is_none() {
        kappa_ball = 0.0;
    }
    Ok(ConvexityCertificate {
        kappa_chord,
        kappa_ball,
        kappa_min: opts.kappa_min,
        pass: kappa_chord.min(kappa_ball) >= opts.kappa_min,
        samples: n,
        max_spacing,
        resolution_error,
        chord_pairs,
        chord_witness,
        ball_witness,
        sample_digest: digest(boundary),
    })
}
