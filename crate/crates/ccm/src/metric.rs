//! Riemannian metric machinery built on a polynomial dual metric `W(x)`.
//!
//! The dual metric is the synthesis variable; the metric itself is its
//! pointwise inverse `M(x) = W(x)^{-1}`. Curve energy and length are
//! quadrature approximations with midpoint metric evaluation,
//! forward-difference tangents, and trapezoid-consistent weights, matching
//! the geodesic solver's discretization.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CcmError, Result};
use crate::geodesic::DiscretizedCurve;
use crate::grid::{BoxBounds, GridSpec};
use crate::poly::{PolyExpr, PolyMatrix};

/// A dual metric `W(x)` with grid-certified eigenvalue bounds
/// `alpha1 I ≤ W(x) ≤ alpha2 I` on a box.
///
/// Note the bounds are on `W`, so the metric `M = W⁻¹` satisfies
/// `1/alpha2 ≤ eig(M) ≤ 1/alpha1`.
#[derive(Debug, Clone)]
pub struct DualMetric {
    w: PolyMatrix,
    pub alpha1: f64,
    pub alpha2: f64,
    pub bounds: BoxBounds,
}

impl DualMetric {
    pub fn new(w: PolyMatrix, alpha1: f64, alpha2: f64, bounds: BoxBounds) -> Result<Self> {
        let w = w.into_symmetric()?;
        if w.rows() != bounds.dim() && w.nvars() != bounds.dim() {
            return Err(CcmError::DimensionMismatch("box dimension must match the state dimension".into()));
        }
        if alpha1 <= 0.0 || alpha2 < alpha1 {
            return Err(CcmError::InvalidArgument("need 0 < alpha1 <= alpha2".into()));
        }
        Ok(DualMetric { w, alpha1, alpha2, bounds })
    }

    /// Certifies eigenvalue bounds on the given grid and stores them.
    pub fn certified(w: PolyMatrix, grid: &GridSpec) -> Result<Self> {
        let w = w.into_symmetric()?;
        let (alpha1, alpha2) = verify_bounds(&w, grid)?;
        Ok(DualMetric { w, alpha1, alpha2, bounds: grid.bounds.clone() })
    }

    /// The Euclidean identity metric on a box.
    pub fn flat(n: usize, bounds: BoxBounds) -> Self {
        DualMetric { w: PolyMatrix::identity(n, n), alpha1: 1.0, alpha2: 1.0, bounds }
    }

    pub fn w(&self) -> &PolyMatrix {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.rows()
    }

    /// Overshoot constant `R = sqrt(alpha2 / alpha1)` for the Euclidean
    /// convergence envelope.
    pub fn overshoot(&self) -> f64 {
        (self.alpha2 / self.alpha1).sqrt()
    }
}

/// Scalar multiplier `ρ(x)` converting the kernel-form condition into a
/// single matrix inequality; also sets the strong-form feedback gain.
#[derive(Debug, Clone)]
pub struct Multiplier {
    pub rho: PolyExpr,
}

impl Multiplier {
    pub fn new(rho: PolyExpr) -> Self {
        Multiplier { rho }
    }

    pub fn constant(c: f64, n: usize) -> Self {
        Multiplier { rho: PolyExpr::constant(c, n) }
    }
}

#[derive(Debug, Clone)]
enum MetricSource {
    /// Metric is the pointwise inverse of a polynomial dual: `M = W⁻¹`,
    /// `∂M/∂x_j = -M (∂W/∂x_j) M`.
    Dual { dual: DualMetric, w_partials: Vec<PolyMatrix> },
    /// Metric given directly as a polynomial matrix (used when the dual is
    /// not polynomial, e.g. 1-D `m(x) = (1+x)²`).
    Direct { m: PolyMatrix, m_partials: Vec<PolyMatrix> },
}

/// Pointwise evaluator for a Riemannian metric: `M(x)`, `W(x) = M(x)⁻¹`, and
/// the metric derivatives `∂M/∂x_j` needed by the geodesic gradient.
#[derive(Debug, Clone)]
pub struct MetricEvaluator {
    source: MetricSource,
    n: usize,
}

impl MetricEvaluator {
    pub fn new(dual: DualMetric) -> Self {
        let n = dual.n();
        let w_partials = (0..n).map(|j| dual.w.partial(j)).collect();
        MetricEvaluator { source: MetricSource::Dual { dual, w_partials }, n }
    }

    /// Builds the evaluator from the metric itself rather than its dual.
    pub fn from_metric(m: PolyMatrix) -> Result<Self> {
        let m = m.into_symmetric()?;
        let n = m.rows();
        let m_partials = (0..m.nvars()).map(|j| m.partial(j)).collect();
        Ok(MetricEvaluator { source: MetricSource::Direct { m, m_partials }, n })
    }

    /// The dual metric, when this evaluator was built from one.
    pub fn dual(&self) -> Option<&DualMetric> {
        match &self.source {
            MetricSource::Dual { dual, .. } => Some(dual),
            MetricSource::Direct { .. } => None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn w_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        match &self.source {
            MetricSource::Dual { dual, .. } => Ok(symmetrize(&dual.w.eval(x))),
            MetricSource::Direct { m, .. } => {
                let mx = symmetrize(&m.eval(x));
                let chol = Cholesky::new(mx).ok_or_else(|| {
                    CcmError::CertificationViolation(format!("M(x) is singular or indefinite at x = {x:?}"))
                })?;
                Ok(symmetrize(&chol.inverse()))
            }
        }
    }

    /// `M(x)`, symmetric. Fails with a certification violation when the
    /// underlying matrix is not positive definite at `x`.
    pub fn m_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        match &self.source {
            MetricSource::Dual { dual, .. } => {
                let w = symmetrize(&dual.w.eval(x));
                let chol = Cholesky::new(w).ok_or_else(|| {
                    CcmError::CertificationViolation(format!("W(x) is singular or indefinite at x = {x:?}"))
                })?;
                Ok(symmetrize(&chol.inverse()))
            }
            MetricSource::Direct { m, .. } => {
                let mx = symmetrize(&m.eval(x));
                if Cholesky::new(mx.clone()).is_none() {
                    return Err(CcmError::CertificationViolation(format!(
                        "M(x) is singular or indefinite at x = {x:?}"
                    )));
                }
                Ok(mx)
            }
        }
    }

    /// `M(x)` together with all `∂M/∂x_j`.
    pub fn m_and_partials_at(&self, x: &[f64]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        match &self.source {
            MetricSource::Dual { w_partials, .. } => {
                let m = self.m_at(x)?;
                let parts = w_partials
                    .iter()
                    .map(|dw| {
                        let dwx = dw.eval(x);
                        -(&m * dwx * &m)
                    })
                    .collect();
                Ok((m, parts))
            }
            MetricSource::Direct { m_partials, .. } => {
                let m = self.m_at(x)?;
                let parts = m_partials.iter().map(|dm| symmetrize(&dm.eval(x))).collect();
                Ok((m, parts))
            }
        }
    }

    /// Squared Riemannian norm `δ' M(x) δ`.
    pub fn sq_norm(&self, x: &[f64], delta: &DVector<f64>) -> Result<f64> {
        let m = self.m_at(x)?;
        Ok((delta.transpose() * m * delta)[(0, 0)])
    }
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Largest eigenvalue of a symmetric matrix.
pub(crate) fn max_eig(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    a.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn min_eig(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    a.clone().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Top eigenpair of a symmetric matrix.
pub(crate) fn top_eigpair(a: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = a.clone().symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

/// Quadrature Riemannian energy `E(c) ≈ ∫ ‖c_s‖²_c ds` of a discretized
/// curve: nonnegative, zero only for a single-point curve.
pub fn riemannian_energy(curve: &DiscretizedCurve, metric: &MetricEvaluator) -> Result<f64> {
    let n_seg = curve.segments();
    let mut acc = 0.0;
    for k in 0..n_seg {
        let (a, b) = (curve.node(k), curve.node(k + 1));
        let d = b - a;
        let mid = 0.5 * (a + b);
        let m = metric.m_at(mid.as_slice())?;
        acc += n_seg as f64 * (d.transpose() * m * &d)[(0, 0)];
    }
    Ok(acc)
}

/// Quadrature Riemannian length; satisfies `L(c)² ≤ E(c)` up to quadrature
/// tolerance.
pub fn riemannian_length(curve: &DiscretizedCurve, metric: &MetricEvaluator) -> Result<f64> {
    let n_seg = curve.segments();
    let mut acc = 0.0;
    for k in 0..n_seg {
        let (a, b) = (curve.node(k), curve.node(k + 1));
        let d = b - a;
        let mid = 0.5 * (a + b);
        let m = metric.m_at(mid.as_slice())?;
        acc += (d.transpose() * m * &d)[(0, 0)].max(0.0).sqrt();
    }
    Ok(acc)
}

/// Grid-certified eigenvalue range of a symmetric polynomial matrix.
/// Errors if the minimum is not strictly positive.
pub fn verify_bounds(w: &PolyMatrix, grid: &GridSpec) -> Result<(f64, f64)> {
    let (lo, hi, worst) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.point(i);
            let wx = symmetrize(&w.eval(&x));
            let eig = wx.symmetric_eigen().eigenvalues;
            let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi, i)
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY, usize::MAX),
            |a, b| {
                let lo = a.0.min(b.0);
                let hi = a.1.max(b.1);
                let worst = if a.0 <= b.0 { a.2.min(if a.0 == b.0 { b.2 } else { usize::MAX }) } else { b.2 };
                (lo, hi, worst)
            },
        );
    if lo <= 0.0 {
        let at = if worst == usize::MAX { String::new() } else { format!(" near x = {:?}", grid.point(worst)) };
        return Err(CcmError::CertificationViolation(format!(
            "W is not positive definite on the grid (min eigenvalue {lo}{at})"
        )));
    }
    Ok((lo, hi))
}

/// Pushes a dual metric through a differential coordinate change:
/// `W_ξ = Φ W Φ'`. `Φ` must be invertible at every grid point; the result's
/// bounds are re-certified on the same grid.
pub fn transform_metric(dual: &DualMetric, phi: &PolyMatrix, grid: &GridSpec) -> Result<DualMetric> {
    if phi.rows() != dual.n() || phi.cols() != dual.n() {
        return Err(CcmError::DimensionMismatch("Φ must be n×n".into()));
    }
    for x in grid.points() {
        let p = phi.eval(&x);
        if p.lu().try_inverse().is_none() {
            return Err(CcmError::Singular(format!("Φ is singular at grid point {x:?}")));
        }
    }
    let w_xi = phi.matmul(dual.w()).matmul(&phi.transpose());
    // congruence keeps exact entry symmetry only up to term ordering; rebuild
    // the upper triangle to make the flag checkable
    let w_sym = PolyMatrix::from_fn(w_xi.rows(), w_xi.cols(), w_xi.nvars(), |i, j| {
        if i <= j {
            w_xi.get(i, j).clone()
        } else {
            w_xi.get(j, i).clone()
        }
    });
    DualMetric::certified(w_sym, grid)
}
