//! Grid-checked certificates: the kernel-form and multiplier-form
//! stabilizability conditions, the Killing-field condition on the actuated
//! directions, and the quadratic completeness bound for geodesic existence.
//!
//! Checkers are report-style: they always return the worst value found and
//! where it occurred, and a condition "holds" exactly when that value is
//! negative (or zero, for the Killing identity). Grid sweeps run in parallel
//! with a deterministic reduction.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::Result;
use crate::grid::GridSpec;
use crate::metric::{max_eig, symmetrize};
use crate::poly::{directional_derivative, jacobian, PolyExpr, PolyMatrix};
use crate::system::{annihilator, differential_dynamics, ControlAffineSystem};

/// Outcome of a grid-checked matrix-inequality sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub condition: String,
    /// Worst value over the grid: a maximum eigenvalue, or a maximum
    /// residual norm for identity-type conditions.
    pub value: f64,
    pub value_label: String,
    pub worst_point: Vec<f64>,
    pub holds: bool,
    pub grid: String,
}

impl CheckReport {
    /// Line-based text form: one `key: value` pair per line.
    pub fn to_lines(&self) -> String {
        let pt = self.worst_point.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
        format!(
            "condition: {}\n{}: {}\nworst_point: {}\ngrid: {}\nholds: {}\n",
            self.condition, self.value_label, self.value, pt, self.grid, self.holds
        )
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_lines())
    }
}

fn sweep_max(len: usize, eval: impl Fn(usize) -> f64 + Sync) -> (f64, usize) {
    (0..len)
        .into_par_iter()
        .map(|i| (eval(i), i))
        .reduce(
            || (f64::NEG_INFINITY, usize::MAX),
            |a, b| {
                if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
                    a
                } else {
                    b
                }
            },
        )
}

/// Symbolic multiplier-form condition matrix
/// `-∂_f W + (∂f/∂x) W + W (∂f/∂x)' - ρ B B' + 2λ W` in the state ring.
pub fn ccm_rho_matrix(
    sys: &ControlAffineSystem,
    w: &PolyMatrix,
    rho: &PolyExpr,
    lambda: f64,
) -> PolyMatrix {
    let j = jacobian(sys.f());
    let w_dot = directional_derivative(w, sys.f());
    let bbt = sys.b().matmul(&sys.b().transpose());
    w_dot
        .neg()
        .add(&j.matmul(w))
        .add(&w.matmul(&j.transpose()))
        .sub(&bbt.scale_poly(rho))
        .add(&w.scale(2.0 * lambda))
}

/// Evaluates the multiplier-form condition matrix at a single state.
pub fn ccm_rho_matrix_at(
    sys: &ControlAffineSystem,
    w: &PolyMatrix,
    rho: &PolyExpr,
    lambda: f64,
    x: &[f64],
) -> DMatrix<f64> {
    symmetrize(&ccm_rho_matrix(sys, w, rho, lambda).eval(x))
}

/// Sweeps the multiplier-form condition over a grid. Holds iff the maximum
/// eigenvalue is strictly negative.
pub fn check_ccm_rho(
    sys: &ControlAffineSystem,
    w: &PolyMatrix,
    rho: &PolyExpr,
    lambda: f64,
    grid: &GridSpec,
) -> CheckReport {
    let omega = ccm_rho_matrix(sys, w, rho, lambda);
    let (value, idx) = sweep_max(grid.len(), |i| max_eig(&symmetrize(&omega.eval(&grid.point(i)))));
    CheckReport {
        condition: "ccm-rho".into(),
        value,
        value_label: "max_eig".into(),
        worst_point: grid.point(idx),
        holds: value < 0.0,
        grid: grid.describe(),
    }
}

/// Symbolic kernel-form condition matrix
/// `B_⊥' (-Ẇ + A W + W A' + 2λ W) B_⊥` in the `(x, u)` ring, where
/// `Ẇ = ∂_f W + Σ_i u_i ∂_{b_i} W` along the closed flow.
fn ccm_weak_matrix(
    sys: &ControlAffineSystem,
    w: &PolyMatrix,
    lambda: f64,
    b_perp: &DMatrix<f64>,
) -> PolyMatrix {
    let (n, m) = (sys.n(), sys.m());
    let nv = n + m;
    let w_ext = w.extend_vars(nv);
    let mut w_dot = directional_derivative(w, sys.f()).extend_vars(nv);
    for i in 0..m {
        let di = directional_derivative(w, &sys.b_column(i)).extend_vars(nv);
        w_dot = w_dot.add(&di.scale_poly(&PolyExpr::var(n + i, nv)));
    }
    let a = differential_dynamics(sys).a;
    let omega = w_dot
        .neg()
        .add(&a.matmul(&w_ext))
        .add(&w_ext.matmul(&a.transpose()))
        .add(&w_ext.scale(2.0 * lambda));
    let bp = PolyMatrix::from_constant(b_perp, nv);
    bp.transpose().matmul(&omega).matmul(&bp)
}

/// Evaluates the kernel-form condition matrix at one `(x, u)` pair.
pub fn ccm_weak_matrix_at(
    sys: &ControlAffineSystem,
    w: &PolyMatrix,
    lambda: f64,
    x: &[f64],
    u: &[f64],
) -> Result<DMatrix<f64>> {
    let b_perp = annihilator(sys.b())?;
    let omega = ccm_weak_matrix(sys, w, lambda, &b_perp);
    let mut xu = x.to_vec();
    xu.extend_from_slice(u);
    Ok(symmetrize(&omega.eval(&xu)))
}

/// Sweeps the kernel-form condition over a state grid and an optional input
/// grid (`u = 0` when absent; for constant `B` satisfying the Killing
/// condition the inequality is `u`-independent). Fully actuated systems make
/// the condition vacuous and report `-inf`.
pub fn check_ccm_weak(
    sys: &ControlAffineSystem,
    w: &PolyMatrix,
    lambda: f64,
    grid: &GridSpec,
    u_grid: Option<&GridSpec>,
) -> Result<CheckReport> {
    let b_perp = annihilator(sys.b())?;
    let grid_desc = match u_grid {
        Some(ug) => format!("{} u:{}", grid.describe(), ug.describe()),
        None => format!("{} u=0", grid.describe()),
    };
    if b_perp.ncols() == 0 {
        return Ok(CheckReport {
            condition: "ccm-weak".into(),
            value: f64::NEG_INFINITY,
            value_label: "max_eig".into(),
            worst_point: vec![],
            holds: true,
            grid: grid_desc,
        });
    }
    let omega = ccm_weak_matrix(sys, w, lambda, &b_perp);
    let m = sys.m();
    let u_len = u_grid.map(|g| g.len()).unwrap_or(1);
    let total = grid.len() * u_len;
    let point = |i: usize| -> Vec<f64> {
        let (xi, ui) = (i / u_len, i % u_len);
        let mut xu = grid.point(xi);
        match u_grid {
            Some(ug) => xu.extend_from_slice(&ug.point(ui)),
            None => xu.extend_from_slice(&vec![0.0; m]),
        }
        xu
    };
    let (value, idx) = sweep_max(total, |i| max_eig(&symmetrize(&omega.eval(&point(i)))));
    Ok(CheckReport {
        condition: "ccm-weak".into(),
        value,
        value_label: "max_eig".into(),
        worst_point: point(idx),
        holds: value < 0.0,
        grid: grid_desc,
    })
}

/// Killing-field residuals `∂_{b_i} W - (∂b_i/∂x) W - W (∂b_i/∂x)'`, one per
/// actuated direction.
pub fn killing_residuals(sys: &ControlAffineSystem, w: &PolyMatrix) -> Vec<PolyMatrix> {
    (0..sys.m())
        .map(|i| {
            let b_i = sys.b_column(i);
            let jb = jacobian(&b_i);
            directional_derivative(w, &b_i)
                .sub(&jb.matmul(w))
                .sub(&w.matmul(&jb.transpose()))
        })
        .collect()
}

/// Checks the Killing condition. Proven symbolically when every residual is
/// the zero polynomial; otherwise reports the maximum Frobenius norm over
/// the grid.
pub fn check_killing(sys: &ControlAffineSystem, w: &PolyMatrix, grid: &GridSpec) -> CheckReport {
    let residuals = killing_residuals(sys, w);
    if residuals.iter().all(|r| r.is_zero_within(1e-12)) {
        return CheckReport {
            condition: "killing".into(),
            value: 0.0,
            value_label: "max_residual".into(),
            worst_point: vec![],
            holds: true,
            grid: "symbolic identity".into(),
        };
    }
    let (value, idx) = sweep_max(grid.len(), |i| {
        let x = grid.point(i);
        residuals.iter().map(|r| r.eval(&x).norm()).fold(0.0, f64::max)
    });
    CheckReport {
        condition: "killing".into(),
        value,
        value_label: "max_residual".into(),
        worst_point: grid.point(idx),
        holds: value == 0.0,
        grid: grid.describe(),
    }
}

/// Completeness test for geodesic existence: true iff
/// `λ_max(W(x)) ≤ |A x + b|²` at every grid point.
pub fn check_completeness(w: &PolyMatrix, a: &DMatrix<f64>, b: &DVector<f64>, grid: &GridSpec) -> bool {
    let (worst, _) = sweep_max(grid.len(), |i| {
        let x = grid.point(i);
        let lam = max_eig(&symmetrize(&w.eval(&x)));
        let xv = DVector::from_column_slice(&x);
        lam - (a * xv + b).norm_squared()
    });
    worst <= 0.0
}

/// Fits matrices `(A, b)` such that the quadratic completeness bound holds on
/// the grid: least-squares affine fit of `sqrt(λ_max(W(x)))`, lifted by a
/// constant row so the bound dominates pointwise.
pub fn fit_completeness_bound(w: &PolyMatrix, grid: &GridSpec) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = grid.dim();
    let npts = grid.len();
    let mut design = DMatrix::zeros(npts, n + 1);
    let mut rhs = DVector::zeros(npts);
    for i in 0..npts {
        let x = grid.point(i);
        for j in 0..n {
            design[(i, j)] = x[j];
        }
        design[(i, n)] = 1.0;
        rhs[i] = max_eig(&symmetrize(&w.eval(&x))).max(0.0).sqrt();
    }
    let sol = (design.transpose() * &design)
        .lu()
        .solve(&(design.transpose() * &rhs))
        .ok_or_else(|| crate::error::CcmError::Singular("degenerate completeness fit".into()))?;
    let a_row = sol.rows(0, n).transpose();
    let b0 = sol[n];
    // lift: r² covers the worst shortfall of the fitted affine bound
    let mut r2: f64 = 0.0;
    for i in 0..npts {
        let x = grid.point(i);
        let h: f64 = (0..n).map(|j| a_row[j] * x[j]).sum::<f64>() + b0;
        let need = rhs[i] * rhs[i] - h * h;
        r2 = r2.max(need);
    }
    let mut a = DMatrix::zeros(2, n);
    a.row_mut(0).copy_from(&a_row);
    let b = DVector::from_vec(vec![b0, r2.max(0.0).sqrt()]);
    Ok((a, b))
}
