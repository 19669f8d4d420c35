//! Continuous algebraic Riccati equation by Newton–Kleinman iteration.
//!
//! Lyapunov sub-solves go through the Kronecker linear system, which is fine
//! at the state dimensions this crate targets (n ≤ 4 or so). The initial
//! stabilizing gain comes from Bass's eigenvalue-shift construction.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{CcmError, Result};

/// LQR data: linearization `(A, B)` and costs `(Q, R)` with `R ≻ 0`.
#[derive(Debug, Clone)]
pub struct LqrProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Stabilizing solution of the continuous ARE together with the optimal gain.
#[derive(Debug, Clone)]
pub struct LqrSolution {
    /// `P = P' ≻ 0` with `A'P + PA - P B R⁻¹ B' P + Q = 0`.
    pub p: DMatrix<f64>,
    /// `K = R⁻¹ B' P`; the closed loop `A - BK` is Hurwitz.
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `A X + X A' + C = 0` via the Kronecker system
/// `(I ⊗ A + A ⊗ I) vec(X) = -vec(C)`.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || c.nrows() != n || c.ncols() != n {
        return Err(CcmError::DimensionMismatch("Lyapunov solve needs square matrices".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let kron = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DMatrix::from_fn(n * n, 1, |i, _| -c[(i % n, i / n)]);
    let sol = kron
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CcmError::Singular("Lyapunov operator is singular".into()))?;
    Ok(DMatrix::from_fn(n, n, |i, j| sol[(j * n + i, 0)]))
}

fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// True iff every eigenvalue of `a` has a strictly negative real part.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    spectral_abscissa(a) < 0.0
}

/// Initial stabilizing gain by Bass's shift: solve
/// `(A + βI) Z + Z (A + βI)' = 2 B B'` and take `K₀ = B' Z⁻¹`.
fn bass_initial_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = a + beta * DMatrix::identity(n, n);
    let z = solve_lyapunov(&shifted, &(-2.0 * b * b.transpose()))?;
    let z_inv = z
        .lu()
        .try_inverse()
        .ok_or_else(|| CcmError::NonConvergence("pair appears non-stabilizable (Bass step)".into()))?;
    let k0 = b.transpose() * z_inv;
    if !is_hurwitz(&(a - b * &k0)) {
        return Err(CcmError::NonConvergence("Bass gain failed to stabilize".into()));
    }
    Ok(k0)
}

fn are_residual(prob: &LqrProblem, p: &DMatrix<f64>, r_inv: &DMatrix<f64>) -> DMatrix<f64> {
    prob.a.transpose() * p + p * &prob.a - p * &prob.b * r_inv * prob.b.transpose() * p + &prob.q
}

/// Newton–Kleinman iteration for the continuous ARE. Errors when the pair is
/// not stabilizable or the iteration fails to meet the residual tolerance.
pub fn solve_are(prob: &LqrProblem) -> Result<LqrSolution> {
    let n = prob.a.nrows();
    if prob.b.nrows() != n || prob.q.nrows() != n || prob.q.ncols() != n {
        return Err(CcmError::DimensionMismatch("ARE data must share the state dimension".into()));
    }
    let m = prob.b.ncols();
    if prob.r.nrows() != m || prob.r.ncols() != m {
        return Err(CcmError::DimensionMismatch("R must be m×m".into()));
    }
    let r_inv = Cholesky::new(prob.r.clone())
        .ok_or_else(|| CcmError::InvalidArgument("R must be symmetric positive definite".into()))?
        .inverse();

    let mut k = if is_hurwitz(&prob.a) {
        DMatrix::zeros(m, n)
    } else {
        bass_initial_gain(&prob.a, &prob.b)?
    };

    let mut p = DMatrix::zeros(n, n);
    let tol = 1e-11;
    let max_iter = 60;
    for it in 0..max_iter {
        let a_cl = &prob.a - &prob.b * &k;
        let rhs = &prob.q + k.transpose() * &prob.r * &k;
        // A_cl' P + P A_cl = -(Q + K'RK)
        let p_next = solve_lyapunov(&a_cl.transpose(), &rhs)?;
        let p_sym = 0.5 * (&p_next + p_next.transpose());
        k = &r_inv * prob.b.transpose() * &p_sym;
        let res = are_residual(prob, &p_sym, &r_inv).norm();
        p = p_sym;
        if res <= tol {
            if Cholesky::new(p.clone()).is_none() {
                return Err(CcmError::NonConvergence("ARE solution is not positive definite".into()));
            }
            if !is_hurwitz(&(&prob.a - &prob.b * &k)) {
                return Err(CcmError::NonConvergence("closed loop is not Hurwitz".into()));
            }
            return Ok(LqrSolution { p, k, residual: res, iterations: it + 1 });
        }
    }
    Err(CcmError::NonConvergence(format!(
        "Newton–Kleinman did not reach tolerance (residual {})",
        are_residual(prob, &p, &r_inv).norm()
    )))
}
