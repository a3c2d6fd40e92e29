//! Built-in Hamiltonians and the polynomial coefficient-table format.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Hamiltonian, HamiltonianModel, Hessians};
use crate::error::{Error, Result};

/// `H = ½⟨P p, p⟩ + c` with constant symmetric `P`.
#[derive(Debug, Clone)]
pub struct ConstantQuadratic {
    pub p: DMatrix<f64>,
    pub offset: f64,
}

impl Hamiltonian for ConstantQuadratic {
    fn dim(&self) -> usize {
        self.p.nrows()
    }
    fn value(&self, _x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        0.5 * p.dot(&(&self.p * p)) + self.offset
    }
    fn grad_x(&self, x: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
    fn grad_p(&self, _x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        &self.p * p
    }
    fn hessians(&self, x: &DVector<f64>, _p: &DVector<f64>) -> Option<Hessians> {
        let n = x.len();
        Some(Hessians {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, n),
            q: self.p.clone(),
        })
    }
}

/// `H = ⟨c, p⟩`; violates strict convexity, kept for validation tests.
#[derive(Debug, Clone)]
pub struct LinearInP {
    pub c: DVector<f64>,
}

impl Hamiltonian for LinearInP {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn value(&self, _x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        self.c.dot(p)
    }
    fn grad_x(&self, x: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
    fn grad_p(&self, _x: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        self.c.clone()
    }
    fn hessians(&self, x: &DVector<f64>, _p: &DVector<f64>) -> Option<Hessians> {
        let n = x.len();
        Some(Hessians {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, n),
            q: DMatrix::zeros(n, n),
        })
    }
}

/// `H = ½|p|² − ½` at level 0: Euclidean distance in Dirichlet form.
pub fn euclidean_eikonal(n: usize) -> HamiltonianModel {
    assert!(n >= 2, "dimension must be at least 2");
    let h = ConstantQuadratic {
        p: DMatrix::identity(n, n),
        offset: -0.5,
    };
    HamiltonianModel::new("euclidean-eikonal", Arc::new(h), 0.0)
}

/// `H = ½⟨P p, p⟩` at the given level.
pub fn quadratic(p: DMatrix<f64>, level: f64) -> HamiltonianModel {
    assert!(p.is_square(), "P must be square");
    HamiltonianModel::new("quadratic", Arc::new(ConstantQuadratic { p, offset: 0.0 }), level)
}

pub fn linear_in_p(c: DVector<f64>) -> HamiltonianModel {
    HamiltonianModel::new("linear", Arc::new(LinearInP { c }), 0.0)
}

/// One term `coeff · Π x_i^{a_i} · Π p_i^{b_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: f64,
    #[serde(default)]
    pub x: Vec<u32>,
    #[serde(default)]
    pub p: Vec<u32>,
}

/// User polynomial Hamiltonian read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialSpec {
    pub dimension: usize,
    pub level: f64,
    pub terms: Vec<Monomial>,
    #[serde(default)]
    pub smoothness: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Polynomial {
    n: usize,
    terms: Vec<(f64, Vec<u32>)>,
}

fn pow_deriv(v: f64, e: u32, order: u32) -> f64 {
    if order > e {
        return 0.0;
    }
    let mut factor = 1.0;
    for k in 0..order {
        factor *= (e - k) as f64;
    }
    factor * v.powi((e - order) as i32)
}

impl Polynomial {
    pub fn from_spec(spec: &PolynomialSpec) -> Result<Self> {
        let n = spec.dimension;
        if n < 2 {
            return Err(Error::Config("polynomial dimension must be at least 2".into()));
        }
        let mut terms = Vec::with_capacity(spec.terms.len());
        for (i, t) in spec.terms.iter().enumerate() {
            if t.x.len() > n || t.p.len() > n {
                return Err(Error::Config(format!("term {i} has more exponents than the dimension")));
            }
            if !t.coeff.is_finite() {
                return Err(Error::Config(format!("term {i} has a non-finite coefficient")));
            }
            let mut exps = vec![0u32; 2 * n];
            exps[..t.x.len()].copy_from_slice(&t.x);
            exps[n..n + t.p.len()].copy_from_slice(&t.p);
            terms.push((t.coeff, exps));
        }
        Ok(Self { n, terms })
    }

    /// Mixed partial derivative of order given by `orders` over the joint variable `z = (x, p)`.
    fn partial(&self, z: &[f64], orders: &[u32]) -> f64 {
        self.terms
            .iter()
            .map(|(c, e)| {
                let mut prod = *c;
                for k in 0..2 * self.n {
                    if prod == 0.0 {
                        break;
                    }
                    prod *= pow_deriv(z[k], e[k], orders[k]);
                }
                prod
            })
            .sum()
    }

    fn joint(x: &DVector<f64>, p: &DVector<f64>) -> Vec<f64> {
        x.iter().chain(p.iter()).copied().collect()
    }
}

impl Hamiltonian for Polynomial {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        self.partial(&Self::joint(x, p), &vec![0; 2 * self.n])
    }
    fn grad_x(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let z = Self::joint(x, p);
        DVector::from_fn(self.n, |i, _| {
            let mut o = vec![0; 2 * self.n];
            o[i] = 1;
            self.partial(&z, &o)
        })
    }
    fn grad_p(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let z = Self::joint(x, p);
        DVector::from_fn(self.n, |i, _| {
            let mut o = vec![0; 2 * self.n];
            o[self.n + i] = 1;
            self.partial(&z, &o)
        })
    }
    fn hessians(&self, x: &DVector<f64>, p: &DVector<f64>) -> Option<Hessians> {
        let n = self.n;
        let z = Self::joint(x, p);
        let second = |a: usize, b: usize| {
            let mut o = vec![0; 2 * n];
            o[a] += 1;
            o[b] += 1;
            self.partial(&z, &o)
        };
        Some(Hessians {
            a: DMatrix::from_fn(n, n, |i, j| second(i, j)),
            b: DMatrix::from_fn(n, n, |i, j| second(i, n + j)),
            q: DMatrix::from_fn(n, n, |i, j| second(n + i, n + j)),
        })
    }
}

pub fn polynomial_model(spec: &PolynomialSpec) -> Result<HamiltonianModel> {
    let poly = Polynomial::from_spec(spec)?;
    let mut model = HamiltonianModel::new("polynomial", Arc::new(poly), spec.level);
    model.smoothness = spec.smoothness.clone();
    Ok(model)
}
