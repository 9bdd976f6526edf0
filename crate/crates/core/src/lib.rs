//! Adjoint-based shape optimization of an obstacle in incompressible flow.
//!
//! The crate is generic over the scalar type via [`scalar::Scalar`]; the
//! aliases below fix `f64` for ordinary use.

// Index loops mirror the stencil formulas; iterator rewrites obscure them.
#![allow(clippy::needless_range_loop)]

pub mod adjoint;
pub mod constraints;
pub mod descent;
pub mod error;
pub mod field;
pub mod flow;
pub mod gradient_check;
pub mod fv;
pub mod linalg;
pub mod mesh;
pub mod meshgen;
pub mod optimizer;
pub mod scalar;
pub mod shape_gradient;
pub mod vtk;

pub use scalar::{num, Scalar};

/// Default-precision 2-vector.
pub type Vec2 = scalar::Vec2<f64>;
/// Default-precision 2x2 matrix.
pub type Mat2 = scalar::Mat2<f64>;
/// Default-precision mesh.
pub type Mesh = mesh::Mesh<f64>;
