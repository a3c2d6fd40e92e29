//! Conjugate and cut loci of characteristics of Dirichlet-type
//! Hamilton–Jacobi equations.
//!
//! The crate integrates Hamiltonian characteristics from a source
//! (hypersurface or point), propagates Lagrangian frames along them to find
//! conjugate times, minimizes the action over a discrete family of
//! characteristics to find cut times, and measures regularity of the
//! resulting functions. The round sphere in stereographic coordinates ships
//! with closed-form oracles.

pub mod artifact;
pub mod error;
pub mod hamiltonian;
pub mod linearized;
pub mod loci;
pub mod ode;
pub mod regularity;
pub mod scenario;
pub mod source;
pub mod sphere;
pub mod verify;

pub use error::{Error, Result};
