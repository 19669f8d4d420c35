//! Rectangular boxes and finite evaluation grids.
//!
//! Every "for all x" condition in this crate is certified on a finite grid
//! inside a declared box, never globally.

use crate::error::{CcmError, Result};

/// An axis-aligned box given by per-dimension bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(CcmError::DimensionMismatch("box bounds have different lengths".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return Err(CcmError::InvalidArgument("box requires lower < upper componentwise".into()));
        }
        Ok(BoxBounds { lower, upper })
    }

    /// The symmetric box `[-h, h]^n`.
    pub fn centered(half_width: f64, n: usize) -> Self {
        BoxBounds { lower: vec![-half_width; n], upper: vec![half_width; n] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(xi, (l, u))| *xi >= *l - 1e-12 && *xi <= *u + 1e-12)
    }

    /// Largest coordinate magnitude per dimension, used for monomial scaling.
    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).max(1e-12))
            .collect()
    }

    pub fn describe(&self) -> String {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| format!("[{l},{u}]"))
            .collect::<Vec<_>>()
            .join("x")
    }
}

/// A uniform grid over a box, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub bounds: BoxBounds,
    pub points_per_dim: Vec<usize>,
}

impl GridSpec {
    pub fn new(bounds: BoxBounds, points_per_dim: Vec<usize>) -> Result<Self> {
        if points_per_dim.len() != bounds.dim() {
            return Err(CcmError::DimensionMismatch("points_per_dim length must match box dimension".into()));
        }
        if points_per_dim.iter().any(|&k| k == 0) {
            return Err(CcmError::InvalidArgument("grids need at least one point per dimension".into()));
        }
        Ok(GridSpec { bounds, points_per_dim })
    }

    /// Uniform resolution in every dimension.
    pub fn uniform(bounds: BoxBounds, points: usize) -> Result<Self> {
        let d = bounds.dim();
        Self::new(bounds, vec![points; d])
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn len(&self) -> usize {
        self.points_per_dim.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single-point dimensions certify nothing; callers flag such grids.
    pub fn is_degenerate(&self) -> bool {
        self.points_per_dim.iter().any(|&k| k == 1)
    }

    /// The grid point at flat index `idx` (row-major over dimensions).
    pub fn point(&self, idx: usize) -> Vec<f64> {
        debug_assert!(idx < self.len());
        let mut rem = idx;
        let mut x = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let k = self.points_per_dim[d];
            let i = rem % k;
            rem /= k;
            let (l, u) = (self.bounds.lower[d], self.bounds.upper[d]);
            x[d] = if k == 1 { 0.5 * (l + u) } else { l + (u - l) * i as f64 / (k - 1) as f64 };
        }
        x
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Doubles the per-dimension resolution (verification grid).
    pub fn refine(&self, factor: usize) -> Self {
        GridSpec {
            bounds: self.bounds.clone(),
            points_per_dim: self.points_per_dim.iter().map(|&k| k * factor).collect(),
        }
    }

    pub fn describe(&self) -> String {
        let pts = self.points_per_dim.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("x");
        format!("box={} points={}", self.bounds.describe(), pts)
    }
}
