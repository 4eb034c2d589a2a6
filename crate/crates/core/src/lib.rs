//! Diffusion MRI signal simulation on tetrahedral meshes through the
//! Laplace eigenfunction ("Matrix Formalism") representation.
//!
//! The pipeline is:
//!
//! 1. [`mesh`]: load or generate a P1 tetrahedral mesh (lengths in μm).
//! 2. [`fem`]: assemble mass, stiffness and first-moment matrices.
//! 3. [`eig`]: compute all Neumann Laplace eigenpairs below
//!    `(π / l_s_min)² D₀`, certified complete by matrix inertia.
//! 4. [`mf`]: project the moment matrices onto the eigenbasis and evaluate
//!    signals for any PGSE sequence, gradient amplitude and direction.
//!
//! [`btpde`] solves the semi-discrete Bloch-Torrey equation directly and is
//! the reference the reduced model is checked against. [`btspec`] exposes
//! the eigen-decomposition of the Bloch-Torrey operator in the Laplace basis,
//! and [`analysis`] holds the cross-method metrics.
//!
//! Internal units: μm, ms, μm²/ms, T/m. b-values are reported in s/mm².

pub mod analysis;
pub mod btpde;
pub mod btspec;
pub mod eig;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod mf;
pub mod quad;
pub mod records;
pub mod seq;
pub mod skyline;
pub mod sparse;
pub mod units;

mod error;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
