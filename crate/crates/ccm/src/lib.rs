//! Control contraction metrics for polynomial control-affine systems.
//!
//! The crate covers the full workflow: exact polynomial system descriptions,
//! grid-checked stabilizability certificates in the convex dual variables
//! `(W, ρ)`, a feasibility solver that searches for them, Riemannian
//! geodesics under the certified metric, the geodesic-based tracking
//! controllers built from a differential feedback, and a simulation harness
//! that verifies the promised exponential convergence envelopes.

pub mod certify;
pub mod error;
pub mod geodesic;
pub mod grid;
pub mod metric;
pub mod poly;
pub mod synthesis;
pub mod riccati;
pub mod system;

pub use error::{CcmError, Result};

/// Re-exported so downstream code can name vector/matrix types without a
/// separate dependency.
pub use nalgebra;
