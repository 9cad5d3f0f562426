//! Multiscale differential Riccati equations for LQR problems.
//!
//! P1 finite elements on nested triangulations, localized orthogonal
//! decomposition (LOD) of the multiscale diffusion operator, a low-rank
//! Strang-splitting integrator for the matrix-valued Riccati equation and
//! operator-norm error evaluation in low-rank form.

pub mod assembly;
pub mod dre;
pub mod error;
pub mod experiment;
pub mod lod;
pub mod lowrank;
pub mod mesh;
pub mod norms;
pub mod sparse;

pub use error::{Error, Result};
