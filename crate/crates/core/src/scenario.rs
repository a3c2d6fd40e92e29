//! Scenario files: model, source, mesh, horizons and tolerances, with a
//! content hash recorded in every artifact.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hamiltonian::catalog::{euclidean_eikonal, polynomial_model, PolynomialSpec};
use crate::hamiltonian::{HamiltonianModel, PhasePoint};
use crate::linearized::SVD_TOL;
use crate::loci::{ConjugateOptions, FieldOptions, ScanOptions};
use crate::source::SourceSpec;
use crate::sphere::{perturbed_model, round_model, PerturbationSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRef {
    /// Built-in model: `euclidean-eikonal`, `sphere-chart` or `sphere-chart-perturbed`.
    Catalog { name: String, dimension: usize },
    /// Coefficient table, relative to the scenario file; inlined on load.
    File(String),
    Polynomial(PolynomialSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub integration: f64,
    pub refine: f64,
    pub angle: f64,
    pub time: f64,
    pub capture_radius: f64,
    #[serde(default = "default_svd")]
    pub svd: f64,
    /// Margin of the action band above the field correction.
    #[serde(default = "default_band")]
    pub band: f64,
}

fn default_svd() -> f64 {
    SVD_TOL
}

fn default_band() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularitySettings {
    /// Radii at which the Lipschitz quotient is reported, in parameter units.
    pub lipschitz_radii: Vec<f64>,
    pub semiconcavity_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexitySettings {
    pub base: Vec<f64>,
    pub directions: usize,
    pub kappa_min: f64,
    #[serde(default)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    /// Integration tolerance of the oracle comparisons.
    pub integration: f64,
    pub per_axis: usize,
    pub s_lo: f64,
    pub s_hi: f64,
    pub s_count: usize,
    pub symplectic_rays: usize,
    pub dexp_rays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub name: String,
    pub model: ModelRef,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    pub source: SourceSpec,
    pub resolution: usize,
    pub horizon: f64,
    /// Horizon of the value field; without it no cut times are computed.
    #[serde(default)]
    pub field_horizon: Option<f64>,
    pub tolerances: Tolerances,
    #[serde(default)]
    pub regularity: Option<RegularitySettings>,
    #[serde(default)]
    pub convexity: Option<ConvexitySettings>,
    #[serde(default)]
    pub oracle: Option<OracleSettings>,
    #[serde(default)]
    pub seed: u64,
}

/// A validated scenario with file references inlined.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub hash: String,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<LoadedScenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut s: Scenario = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let ModelRef::File(rel) = &s.model {
            let file = path.parent().unwrap_or(Path::new(".")).join(rel);
            let spec_text = std::fs::read_to_string(&file)
                .map_err(|e| Error::Config(format!("coefficient file {}: {e}", file.display())))?;
            let spec: PolynomialSpec =
                serde_json::from_str(&spec_text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
            s.model = ModelRef::Polynomial(spec);
        }
        s.load()
    }

    /// Validates and hashes a scenario whose model is already inline.
    pub fn load(self) -> Result<LoadedScenario> {
        if matches!(self.model, ModelRef::File(_)) {
            return Err(Error::Config("file model references must be resolved through Scenario::from_path".into()));
        }
        self.validate()?;
        let hash = hex::encode(Sha256::digest(self.canonical_json()?.as_bytes()));
        Ok(LoadedScenario { scenario: self, hash })
    }

    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn dimension(&self) -> usize {
        match &self.model {
            ModelRef::Catalog { dimension, .. } => *dimension,
            ModelRef::Polynomial(p) => p.dimension,
            ModelRef::File(_) => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!("schema {} is not supported (expected {SCHEMA_VERSION})", self.schema));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("integration", t.integration),
            ("refine", t.refine),
            ("angle", t.angle),
            ("time", t.time),
            ("capture_radius", t.capture_radius),
            ("svd", t.svd),
            ("band", t.band),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("tolerance {name} must be positive, got {v}"));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if let Some(fh) = self.field_horizon {
            if !(fh > 0.0 && fh.is_finite()) {
                return bad(format!("field_horizon must be positive, got {fh}"));
            }
        }
        if self.resolution < 2 {
            return bad("resolution must be at least 2".into());
        }
        let n = self.dimension();
        let source_dim = match &self.source {
            SourceSpec::Point { base } => base.len(),
            SourceSpec::Hypersurface { param_box, .. } => param_box.lower.len() + 1,
        };
        if source_dim != n {
            return bad(format!("source has dimension {source_dim}, model {n}"));
        }
        if let Some(r) = &self.regularity {
            if r.lipschitz_radii.is_empty() || r.lipschitz_radii.iter().any(|&x| !(x > 0.0)) || !(r.semiconcavity_delta > 0.0) {
                return bad("regularity radii must be positive".into());
            }
        }
        if let Some(o) = &self.oracle {
            if !(o.integration > 0.0) || o.per_axis < 2 || o.s_count < 2 || !(o.s_lo > 0.0 && o.s_hi > o.s_lo) {
                return bad("oracle needs a positive tolerance, two points per axis and 0 < s_lo < s_hi".into());
            }
        }
        if let Some(c) = &self.convexity {
            if c.base.len() != n || c.directions < 8 || !(c.kappa_min >= 0.0) {
                return bad("convexity needs a base point of the model dimension, ≥ 8 directions and κ_min ≥ 0".into());
            }
        }
        self.model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<HamiltonianModel> {
        match &self.model {
            ModelRef::Catalog { name, dimension } => {
                let n = *dimension;
                if n < 2 {
                    return Err(Error::Config(format!("dimension must be at least 2, got {n}")));
                }
                let pert = self.perturbation.as_ref();
                match (name.as_str(), pert) {
                    ("euclidean-eikonal", None) => Ok(euclidean_eikonal(n)),
                    ("sphere-chart", None) => Ok(round_model(n)),
                    ("sphere-chart-perturbed", Some(p)) => perturbed_model(n, p),
                    ("sphere-chart-perturbed", None) => Err(Error::Config("sphere-chart-perturbed needs a perturbation".into())),
                    ("euclidean-eikonal" | "sphere-chart", Some(_)) => {
                        Err(Error::Config(format!("model {name} takes no perturbation")))
                    }
                    _ => Err(Error::Config(format!("unknown catalog model {name:?}"))),
                }
            }
            ModelRef::Polynomial(spec) => {
                if self.perturbation.is_some() {
                    return Err(Error::Config("polynomial models take no perturbation".into()));
                }
                polynomial_model(spec)
            }
            ModelRef::File(_) => Err(Error::Config("unresolved coefficient file".into())),
        }
    }

    pub fn conjugate_options(&self) -> ConjugateOptions {
        ConjugateOptions {
            tol: self.tolerances.integration,
            refine_tol: self.tolerances.refine,
            svd_tol: self.tolerances.svd,
            cross_check: true,
        }
    }

    /// Scan options; `cuts` adds the value field, `classify` the labels.
    pub fn scan_options(&self, cuts: bool, classify: bool) -> ScanOptions {
        let t = &self.tolerances;
        ScanOptions {
            conjugate: self.conjugate_options(),
            field: self.field_horizon.filter(|_| cuts).map(|fh| FieldOptions {
                capture_radius: t.capture_radius,
                horizon: fh,
                tol: t.integration,
            }),
            band_tol: t.band,
            angle_tol: t.angle,
            time_tol: t.time,
            classify: cuts && classify,
        }
    }
}

impl LoadedScenario {
    /// Compact JSON of the tolerance set, as embedded in artifacts.
    pub fn tolerance_json(&self) -> String {
        serde_json::to_string(&self.scenario.tolerances).expect("tolerances serialize")
    }
}

/// Phase points for hypothesis checks: positions in `[−2, 2]^n`, covectors
/// in `[−3, 3]^n`, drawn from the scenario seed.
pub fn validation_samples(n: usize, count: usize, seed: u64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let p = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            PhasePoint::new(x, p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> &'static str {
        r#"{
            "schema": 1,
            "name": "t",
            "model": {"catalog": {"name": "sphere-chart", "dimension": 2}},
            "source": {"kind": "point", "base": [0.0, 0.0]},
            "resolution": 16,
            "horizon": 3.5,
            "tolerances": {"integration": 1e-10, "refine": 1e-7, "angle": 0.01, "time": 0.005, "capture_radius": 0.05}
        }"#
    }

    #[test]
    fn parses_and_hashes_stably() {
        let s: Scenario = serde_json::from_str(sample_json()).unwrap();
        assert_eq!(s.tolerances.svd, SVD_TOL);
        let a = s.clone().load().unwrap();
        let b = s.load().unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
        let round: Scenario = serde_json::from_str(&a.scenario.canonical_json().unwrap()).unwrap();
        assert_eq!(round, a.scenario);
    }

    #[test]
    fn rejects_bad_tolerances_and_models() {
        let mut s: Scenario = serde_json::from_str(sample_json()).unwrap();
        s.tolerances.time = 0.0;
        assert!(matches!(s.clone().load(), Err(Error::Config(_))));
        s.tolerances.time = 1e-3;
        s.model = ModelRef::Catalog {
            name: "torus".into(),
            dimension: 2,
        };
        assert!(matches!(s.clone().load(), Err(Error::Config(_))));
        s.model = ModelRef::Catalog {
            name: "sphere-chart-perturbed".into(),
            dimension: 2,
        };
        assert!(matches!(s.load(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = sample_json().replace("\"seed\"", "\"x\"").replace("\"horizon\": 3.5", "\"horizon\": 3.5, \"bogus\": 1");
        assert!(serde_json::from_str::<Scenario>(&text).is_err());
    }

    #[test]
    fn validation_samples_are_seeded() {
        assert_eq!(validation_samples(2, 5, 3), validation_samples(2, 5, 3));
        assert_ne!(validation_samples(2, 5, 3), validation_samples(2, 5, 4));
    }
}
