//! Control-affine polynomial systems `ẋ = f(x) + B(x) u` and their
//! differential (variational) dynamics.

use nalgebra::{DMatrix, DVector};

use crate::error::{CcmError, Result};
use crate::poly::{jacobian, PolyExpr, PolyMatrix};

/// `ẋ = f(x) + B(x) u` with polynomial `f` (length `n`) and `B` (`n×m`).
///
/// Dynamics are time-invariant; target trajectories may still be
/// time-varying solutions of the system.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    n: usize,
    m: usize,
    f: Vec<PolyExpr>,
    b: PolyMatrix,
}

impl ControlAffineSystem {
    pub fn new(f: Vec<PolyExpr>, b: PolyMatrix) -> Result<Self> {
        let n = f.len();
        if b.rows() != n {
            return Err(CcmError::DimensionMismatch(format!(
                "B has {} rows but f has {} entries",
                b.rows(),
                n
            )));
        }
        if f.iter().any(|p| p.nvars() != n) || b.nvars() != n {
            return Err(CcmError::DimensionMismatch(
                "f and B entries must be polynomials in the n state variables".into(),
            ));
        }
        Ok(ControlAffineSystem { n, m: b.cols(), f, b })
    }

    /// Parses `f` entries and a row-major grid of `B` entries, all in
    /// variables `x1..xn`.
    pub fn parse(n: usize, m: usize, f: &[&str], b: &[&str]) -> Result<Self> {
        if f.len() != n {
            return Err(CcmError::DimensionMismatch(format!("expected {n} drift entries, got {}", f.len())));
        }
        let f: Result<Vec<PolyExpr>> = f.iter().map(|s| PolyExpr::parse(s, n)).collect();
        let b = if m == 0 {
            PolyMatrix::zero(n, 0, n)
        } else {
            PolyMatrix::parse(n, m, n, b)?
        };
        Self::new(f?, b)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn f(&self) -> &[PolyExpr] {
        &self.f
    }

    pub fn b(&self) -> &PolyMatrix {
        &self.b
    }

    /// The `i`-th actuated vector field `b_i`.
    pub fn b_column(&self, i: usize) -> Vec<PolyExpr> {
        self.b.column(i)
    }

    pub fn eval_f(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.f[i].eval(x.as_slice()))
    }

    pub fn eval_b(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.b.eval(x.as_slice())
    }

    /// Right-hand side `f(x) + B(x) u`.
    pub fn xdot(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(u.len(), self.m, "control dimension mismatch");
        self.eval_f(x) + self.eval_b(x) * u
    }

    /// Residual `|ẋ - f(x) - B(x)u|` for trajectory validation.
    pub fn residual(&self, x: &DVector<f64>, u: &DVector<f64>, xdot: &DVector<f64>) -> f64 {
        (xdot - self.xdot(x, u)).norm()
    }

    /// Applies the affine feedback transformation `u = α(x) + β v`,
    /// returning the system in the new input `v`: drift `f + Bα`, input
    /// matrix `Bβ`.
    pub fn feedback_transform(&self, alpha: &[PolyExpr], beta: &DMatrix<f64>) -> Result<Self> {
        if alpha.len() != self.m || beta.nrows() != self.m || beta.ncols() != self.m {
            return Err(CcmError::DimensionMismatch("feedback transform has wrong input dimension".into()));
        }
        if beta.clone().lu().try_inverse().is_none() {
            return Err(CcmError::Singular("β must be invertible".into()));
        }
        let mut f = self.f.clone();
        for i in 0..self.n {
            let mut acc = f[i].clone();
            for (k, a) in alpha.iter().enumerate() {
                acc = acc.add(&self.b.get(i, k).mul(a));
            }
            f[i] = acc;
        }
        let beta_poly = PolyMatrix::from_constant(beta, self.n);
        let b = self.b.matmul(&beta_poly);
        Self::new(f, b)
    }

    /// Rewrites the system in coordinates `ξ = T x` for constant invertible
    /// `T`: drift `T f(T⁻¹ξ)`, input matrix `T B(T⁻¹ξ)`.
    pub fn coordinate_transform(&self, t: &DMatrix<f64>) -> Result<Self> {
        if t.nrows() != self.n || t.ncols() != self.n {
            return Err(CcmError::DimensionMismatch("coordinate transform must be n×n".into()));
        }
        let t_inv = t
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| CcmError::Singular("coordinate transform must be invertible".into()))?;
        // images of the old coordinates: x_j = Σ_k (T⁻¹)_{jk} ξ_k
        let images: Vec<PolyExpr> = (0..self.n)
            .map(|j| {
                let mut acc = PolyExpr::zero(self.n);
                for k in 0..self.n {
                    acc = acc.add(&PolyExpr::var(k, self.n).scale(t_inv[(j, k)]));
                }
                acc
            })
            .collect();
        let f_sub: Vec<PolyExpr> = self.f.iter().map(|p| p.compose(&images)).collect();
        let f_new: Vec<PolyExpr> = (0..self.n)
            .map(|i| {
                let mut acc = PolyExpr::zero(self.n);
                for j in 0..self.n {
                    acc = acc.add(&f_sub[j].scale(t[(i, j)]));
                }
                acc
            })
            .collect();
        let b_sub = self.b.map(|p| p.compose(&images));
        let b_new = PolyMatrix::from_constant(t, self.n).matmul(&b_sub);
        Self::new(f_new, b_new)
    }
}

/// The differential dynamics `δ̇x = A(x,u) δx + B(x) δu` with
/// `A = ∂f/∂x + Σ_i (∂b_i/∂x) u_i`, affine in `u`.
#[derive(Debug, Clone)]
pub struct DifferentialDynamics {
    /// `A` as a polynomial matrix in `(x, u)` (inputs trail the states).
    pub a: PolyMatrix,
    /// `B` in the state variables only.
    pub b: PolyMatrix,
    n: usize,
    m: usize,
}

impl DifferentialDynamics {
    pub fn eval_a(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        let mut xu = Vec::with_capacity(self.n + self.m);
        xu.extend_from_slice(x);
        xu.extend_from_slice(u);
        self.a.eval(&xu)
    }

    pub fn eval_b(&self, x: &[f64]) -> DMatrix<f64> {
        self.b.eval(x)
    }
}

/// Assembles the differential dynamics of a system.
pub fn differential_dynamics(sys: &ControlAffineSystem) -> DifferentialDynamics {
    let (n, m) = (sys.n(), sys.m());
    let nv = n + m;
    let mut a = jacobian(sys.f()).extend_vars(nv);
    for i in 0..m {
        let db_i = jacobian(&sys.b_column(i)).extend_vars(nv);
        let u_i = PolyExpr::var(n + i, nv);
        a = a.add(&db_i.scale_poly(&u_i));
    }
    DifferentialDynamics { a, b: sys.b().clone(), n, m }
}

/// Orthonormal basis of the left null space of a constant, full-column-rank
/// input matrix: returns `B_⊥` with `B_⊥'B = 0` and `B_⊥'B_⊥ = I`.
///
/// The columns are built by Gram–Schmidt against the columns of `B`, walking
/// the coordinate basis in order, which makes the result deterministic and
/// exact for coordinate-aligned `B`. Fully actuated systems (`m = n`) get an
/// empty `n×0` matrix; `m = 0` gets the identity.
pub fn annihilator(b: &PolyMatrix) -> Result<DMatrix<f64>> {
    if !b.is_constant() {
        return Err(CcmError::Unsupported(
            "annihilator is only defined for constant input matrices".into(),
        ));
    }
    let n = b.rows();
    let m = b.cols();
    let bc = b.eval(&vec![0.0; b.nvars()]);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..m {
        let mut v: DVector<f64> = bc.column(j).into();
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if norm <= 1e-12 {
            return Err(CcmError::Singular("input matrix is column-rank-deficient".into()));
        }
        basis.push(v / norm);
    }
    let mut complement: Vec<DVector<f64>> = Vec::new();
    for j in 0..n {
        if complement.len() == n - m {
            break;
        }
        let mut v = DVector::zeros(n);
        v[j] = 1.0;
        for q in basis.iter().chain(complement.iter()) {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            complement.push(v / norm);
        }
    }
    if complement.len() != n - m {
        return Err(CcmError::Singular("failed to complete the orthogonal complement".into()));
    }
    let mut out = DMatrix::zeros(n, n - m);
    for (j, v) in complement.iter().enumerate() {
        out.set_column(j, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn planar_example() -> ControlAffineSystem {
        ControlAffineSystem::parse(2, 1, &["-x1 - x1^3 + x2^2", "0"], &["0", "1"]).unwrap()
    }

    #[test]
    fn constant_b_differential_dynamics_is_u_independent() {
        let sys = ControlAffineSystem::parse(
            3,
            1,
            &["-x1 + x3", "x1^2 - x2 - 2*x1*x3 + x3", "-x2"],
            &["0", "0", "1"],
        )
        .unwrap();
        let dd = differential_dynamics(&sys);
        let x = [0.4, -1.1, 0.9];
        let a0 = dd.eval_a(&x, &[0.0]);
        let a1 = dd.eval_a(&x, &[7.5]);
        assert_relative_eq!(a0, a1, epsilon = 0.0);
        assert_relative_eq!(a0, jacobian(sys.f()).eval(&x), epsilon = 0.0);
    }

    #[test]
    fn state_dependent_b_contributes_gradient_times_u() {
        let sys = ControlAffineSystem::parse(2, 1, &["0", "0"], &["0", "x1"]).unwrap();
        let dd = differential_dynamics(&sys);
        let a = dd.eval_a(&[0.3, 0.7], &[2.0]);
        // ∂b1/∂x = [[0,0],[1,0]] scaled by u1 = 2
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]));
    }

    #[test]
    fn linear_system_has_constant_a() {
        let sys = ControlAffineSystem::parse(2, 1, &["x2", "-2*x1 - 0.5*x2"], &["0", "1"]).unwrap();
        let dd = differential_dynamics(&sys);
        let a0 = dd.eval_a(&[0.0, 0.0], &[0.0]);
        let a1 = dd.eval_a(&[3.0, -4.0], &[1.5]);
        assert_relative_eq!(a0, a1, epsilon = 0.0);
    }

    #[test]
    fn differential_dynamics_affine_in_u() {
        let sys = ControlAffineSystem::parse(2, 2, &["x2^2", "-x1"], &["x2", "0", "0", "x1"]).unwrap();
        let dd = differential_dynamics(&sys);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u1: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let u2: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a0 = dd.eval_a(&x, &[0.0, 0.0]);
            let lhs = dd.eval_a(&x, &[u1[0] + u2[0], u1[1] + u2[1]]);
            let rhs = dd.eval_a(&x, &u1) + dd.eval_a(&x, &u2) - &a0;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn annihilator_of_planar_input() {
        let sys = planar_example();
        let bp = annihilator(sys.b()).unwrap();
        assert_eq!(bp, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        // exact zero for coordinate-aligned B
        let prod = bp.transpose() * sys.eval_b(&DVector::zeros(2));
        assert_eq!(prod.norm(), 0.0);
    }

    #[test]
    fn annihilator_of_third_axis_input() {
        let b = PolyMatrix::parse(3, 1, 3, &["0", "0", "1"]).unwrap();
        let bp = annihilator(&b).unwrap();
        assert_eq!(bp.column(0), DVector::from_vec(vec![1.0, 0.0, 0.0]).column(0));
        assert_eq!(bp.column(1), DVector::from_vec(vec![0.0, 1.0, 0.0]).column(0));
    }

    #[test]
    fn annihilator_fully_actuated_is_empty() {
        let b = PolyMatrix::identity(2, 2);
        let bp = annihilator(&b).unwrap();
        assert_eq!((bp.nrows(), bp.ncols()), (2, 0));
    }

    #[test]
    fn annihilator_random_inputs_orthonormal() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..5usize);
            let m = rng.random_range(1..n);
            let bc = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0f64));
            let b = PolyMatrix::from_constant(&bc, n);
            let bp = match annihilator(&b) {
                Ok(bp) => bp,
                Err(_) => continue, // rank-deficient draw
            };
            assert!((bp.transpose() * &bc).norm() <= 1e-13);
            let gram = bp.transpose() * &bp;
            assert_relative_eq!(gram, DMatrix::identity(n - m, n - m), epsilon = 1e-12);
        }
    }

    #[test]
    fn annihilator_rejects_state_dependent_b() {
        let b = PolyMatrix::parse(2, 1, 2, &["0", "x1"]).unwrap();
        assert!(matches!(annihilator(&b), Err(CcmError::Unsupported(_))));
    }

    #[test]
    fn annihilator_rejects_rank_deficient_b() {
        let b = PolyMatrix::parse(2, 2, 2, &["1", "2", "1", "2"]).unwrap();
        assert!(annihilator(&b).is_err());
    }

    #[test]
    fn feedback_transform_shifts_drift() {
        let sys = planar_example();
        let alpha = vec![PolyExpr::parse("x1^2", 2).unwrap()];
        let beta = DMatrix::from_element(1, 1, 2.0);
        let tr = sys.feedback_transform(&alpha, &beta).unwrap();
        // drift gains B α in the actuated row only
        assert_eq!(tr.f()[0], sys.f()[0]);
        assert_eq!(tr.f()[1], PolyExpr::parse("x1^2", 2).unwrap());
        assert_eq!(tr.b().get(1, 0), &PolyExpr::constant(2.0, 2));
    }

    #[test]
    fn coordinate_transform_matches_pushforward_numerically() {
        let sys = planar_example();
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 1.0]);
        let tr = sys.coordinate_transform(&t).unwrap();
        let t_inv = t.clone().try_inverse().unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..10 {
            let xi = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
            let x = &t_inv * &xi;
            let expected = &t * sys.xdot(&x, &u);
            assert_relative_eq!(tr.xdot(&xi, &u), expected, epsilon = 1e-12);
        }
    }
}
