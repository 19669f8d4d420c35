//! Convex search for a dual metric `W(x)` and multiplier `ρ(x)` making the
//! multiplier-form condition hold with margin on a grid.
//!
//! `W` entries and `ρ` are linear combinations of a monomial basis, so the
//! condition matrix is an affine (here linear) map of the stacked coefficient
//! vector θ. Feasibility is found by minimizing
//!
//! `φ(θ) = max over grid x of max( λ_max(F(θ;x)) + ε,  α1 - λ_min(W(θ;x)) )`
//!
//! by projected subgradient descent with Polyak-style steps, equality anchors
//! eliminated by affine reparametrization, restarts from perturbed
//! initializations, and a secondary descent that shrinks the l¹ norm of the
//! coefficients inside the feasible region. Monomials are scaled by the box
//! half-widths so coefficients stay O(1) regardless of the box size.
//!
//! Every returned candidate is re-verified on a refined grid through the
//! independent symbolic checker in [`crate::certify`]; the two evaluation
//! paths share no assembly code.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::certify::{check_ccm_rho, check_killing, CheckReport};
use crate::error::{CcmError, Result};
use crate::grid::GridSpec;
use crate::metric::{top_eigpair, verify_bounds, DualMetric, Multiplier};
use crate::poly::{directional_derivative, jacobian, PolyExpr, PolyMatrix, Term};
use crate::system::ControlAffineSystem;

/// All monomial exponent vectors over `n` variables with total degree at most
/// `max_degree` and support inside `allowed_vars`, in graded-lex order.
pub fn monomials(n: usize, max_degree: u32, allowed_vars: &[usize]) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; n]];
    let mut frontier = vec![vec![0u32; n]];
    for _ in 0..max_degree {
        let mut next = Vec::new();
        for e in &frontier {
            for &v in allowed_vars {
                let mut e2 = e.clone();
                e2[v] += 1;
                next.push(e2);
            }
        }
        next.sort();
        next.dedup();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.sort_by(|a, b| {
        let da: u32 = a.iter().sum();
        let db: u32 = b.iter().sum();
        da.cmp(&db).then_with(|| a.cmp(b))
    });
    out.dedup();
    out
}

/// Linear equality anchors `W(x0) = W0`, `ρ(x0) = rho0`.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub x0: Vec<f64>,
    pub w0: DMatrix<f64>,
    pub rho0: f64,
}

/// Solver tuning knobs.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub restarts: usize,
    /// Iterations without best-value improvement before a restart fires.
    pub stall_window: usize,
    pub l1_iters: usize,
    pub seed: u64,
    /// Verification grid refinement factor (per dimension).
    pub verify_refine: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 40_000,
            restarts: 5,
            stall_window: 1_500,
            l1_iters: 400,
            seed: 0,
            verify_refine: 2,
        }
    }
}

/// A feasibility problem instance: system, rate, grid, bases, margin, and
/// optional anchors.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    pub sys: ControlAffineSystem,
    pub lambda: f64,
    pub grid: GridSpec,
    pub w_basis: Vec<Vec<u32>>,
    pub rho_basis: Vec<Vec<u32>>,
    /// Required margin ε > 0 on the condition's maximum eigenvalue.
    pub margin: f64,
    /// Grid positivity floor `W(x) ⪰ alpha1_floor · I`.
    pub alpha1_floor: f64,
    pub anchor: Option<Anchor>,
    pub options: SolverOptions,
}

impl SynthesisProblem {
    pub fn new(
        sys: ControlAffineSystem,
        lambda: f64,
        grid: GridSpec,
        w_basis: Vec<Vec<u32>>,
        rho_basis: Vec<Vec<u32>>,
        margin: f64,
        alpha1_floor: f64,
    ) -> Result<Self> {
        let n = sys.n();
        if grid.dim() != n {
            return Err(CcmError::DimensionMismatch("grid dimension must match the state dimension".into()));
        }
        if w_basis.is_empty() || rho_basis.is_empty() {
            return Err(CcmError::InvalidArgument("monomial bases must be non-empty".into()));
        }
        if w_basis.iter().chain(rho_basis.iter()).any(|e| e.len() != n) {
            return Err(CcmError::DimensionMismatch("basis exponent vectors must have length n".into()));
        }
        if margin <= 0.0 {
            return Err(CcmError::InvalidArgument("margin must be positive".into()));
        }
        if alpha1_floor <= 0.0 {
            return Err(CcmError::InvalidArgument("positivity floor must be positive".into()));
        }
        // Killing condition by construction: with constant B every basis
        // monomial must be constant along each actuated direction.
        if sys.b().is_constant() {
            for exps in &w_basis {
                let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }])?;
                for i in 0..sys.m() {
                    let ddir = directional_derivative(
                        &PolyMatrix::new(1, 1, vec![p.clone()])?,
                        &sys.b_column(i),
                    );
                    if !ddir.get(0, 0).is_zero_within(1e-12) {
                        return Err(CcmError::InvalidArgument(format!(
                            "W basis monomial {p} varies along actuated direction b_{}; \
                             it would violate the Killing condition",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(SynthesisProblem {
            sys,
            lambda,
            grid,
            w_basis,
            rho_basis,
            margin,
            alpha1_floor,
            anchor: None,
            options: SolverOptions::default(),
        })
    }

    pub fn with_anchor(mut self, anchor: Anchor) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    fn n(&self) -> usize {
        self.sys.n()
    }

    /// Upper-triangle index pairs in row-major order.
    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                out.push((i, j));
            }
        }
        out
    }

    pub fn theta_dim(&self) -> usize {
        self.pairs().len() * self.w_basis.len() + self.rho_basis.len()
    }

    /// `Π σ_j^{e_j}` per W-basis monomial (box half-width scaling).
    fn w_scales(&self) -> Vec<f64> {
        let sigma = self.grid.bounds.half_widths();
        self.w_basis.iter().map(|e| scale_of(e, &sigma)).collect()
    }

    fn rho_scales(&self) -> Vec<f64> {
        let sigma = self.grid.bounds.half_widths();
        self.rho_basis.iter().map(|e| scale_of(e, &sigma)).collect()
    }

    /// Reconstructs `(W, ρ)` polynomials from a coefficient vector.
    pub fn parts_from_theta(&self, theta: &DVector<f64>) -> Result<(PolyMatrix, PolyExpr)> {
        let n = self.n();
        let nb_w = self.w_basis.len();
        let w_scales = self.w_scales();
        let rho_scales = self.rho_scales();
        let pairs = self.pairs();
        let mut w = PolyMatrix::zero(n, n, n);
        for (p_idx, &(i, j)) in pairs.iter().enumerate() {
            let mut entry = PolyExpr::zero(n);
            for (k, exps) in self.w_basis.iter().enumerate() {
                let c = theta[p_idx * nb_w + k] / w_scales[k];
                if c != 0.0 {
                    entry = entry.add(&PolyExpr::monomial(c, exps.clone()));
                }
            }
            w.set(i, j, entry.clone());
            if i != j {
                w.set(j, i, entry);
            }
        }
        let mut rho = PolyExpr::zero(n);
        let base = pairs.len() * nb_w;
        for (k, exps) in self.rho_basis.iter().enumerate() {
            let c = theta[base + k] / rho_scales[k];
            if c != 0.0 {
                rho = rho.add(&PolyExpr::monomial(c, exps.clone()));
            }
        }
        Ok((w.into_symmetric()?, rho))
    }

    /// Embeds explicit `(W, ρ)` polynomials into the coefficient vector.
    /// Errors when a monomial falls outside the declared basis.
    pub fn theta_from_parts(&self, w: &PolyMatrix, rho: &PolyExpr) -> Result<DVector<f64>> {
        let nb_w = self.w_basis.len();
        let w_scales = self.w_scales();
        let rho_scales = self.rho_scales();
        let pairs = self.pairs();
        let mut theta = DVector::zeros(self.theta_dim());
        for (p_idx, &(i, j)) in pairs.iter().enumerate() {
            for t in w.get(i, j).terms() {
                let k = self
                    .w_basis
                    .iter()
                    .position(|e| e == &t.exps)
                    .ok_or_else(|| CcmError::InvalidArgument(format!("W entry monomial outside basis: exps {:?}", t.exps)))?;
                theta[p_idx * nb_w + k] = t.coeff * w_scales[k];
            }
        }
        let base = pairs.len() * nb_w;
        for t in rho.terms() {
            let k = self
                .rho_basis
                .iter()
                .position(|e| e == &t.exps)
                .ok_or_else(|| CcmError::InvalidArgument(format!("ρ monomial outside basis: exps {:?}", t.exps)))?;
            theta[base + k] = t.coeff * rho_scales[k];
        }
        Ok(theta)
    }

    /// Convex objective `φ(θ)` over the synthesis grid (test and diagnostic
    /// surface; the solver uses the same workspace internally).
    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        let ws = Workspace::build(self);
        ws.phi(theta).0
    }
}

fn scale_of(exps: &[u32], sigma: &[f64]) -> f64 {
    exps.iter()
        .zip(sigma)
        .map(|(&e, &s)| s.powi(e as i32))
        .product()
}

/// Per-grid-point data for fast affine assembly of the condition matrix.
struct PointData {
    /// Scaled W-basis monomial values at the point.
    mono_w: Vec<f64>,
    /// Scaled values of `∂_f m̃` at the point (drift directional derivative).
    dmono_w: Vec<f64>,
    /// Drift Jacobian at the point.
    j: DMatrix<f64>,
    /// `B B'` at the point.
    bbt: DMatrix<f64>,
    /// Scaled ρ-basis monomial values.
    mono_rho: Vec<f64>,
}

struct Workspace {
    points: Vec<PointData>,
    pairs: Vec<(usize, usize)>,
    nb_w: usize,
    nb_rho: usize,
    n: usize,
    lambda: f64,
    eps: f64,
    alpha1: f64,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Branch {
    Lmi,
    Positivity,
}

impl Workspace {
    fn build(prob: &SynthesisProblem) -> Self {
        let n = prob.n();
        let sigma = prob.grid.bounds.half_widths();
        let jac = jacobian(prob.sys.f());
        let bbt = prob.sys.b().matmul(&prob.sys.b().transpose());
        let f = prob.sys.f();
        let w_polys: Vec<(PolyExpr, PolyExpr, f64)> = prob
            .w_basis
            .iter()
            .map(|exps| {
                let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }]).unwrap();
                // ∂_f p as an exact polynomial
                let mut dp = PolyExpr::zero(n);
                for (jv, fj) in f.iter().enumerate() {
                    dp = dp.add(&p.partial(jv).mul(fj));
                }
                (p, dp, scale_of(exps, &sigma))
            })
            .collect();
        let rho_polys: Vec<(PolyExpr, f64)> = prob
            .rho_basis
            .iter()
            .map(|exps| {
                let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }]).unwrap();
                (p, scale_of(exps, &sigma))
            })
            .collect();
        let points: Vec<PointData> = (0..prob.grid.len())
            .into_par_iter()
            .map(|idx| {
                let x = prob.grid.point(idx);
                PointData {
                    mono_w: w_polys.iter().map(|(p, _, s)| p.eval(&x) / s).collect(),
                    dmono_w: w_polys.iter().map(|(_, dp, s)| dp.eval(&x) / s).collect(),
                    j: jac.eval(&x),
                    bbt: bbt.eval(&x),
                    mono_rho: rho_polys.iter().map(|(p, s)| p.eval(&x) / s).collect(),
                }
            })
            .collect();
        Workspace {
            points,
            pairs: prob.pairs(),
            nb_w: prob.w_basis.len(),
            nb_rho: prob.rho_basis.len(),
            n,
            lambda: prob.lambda,
            eps: prob.margin,
            alpha1: prob.alpha1_floor,
        }
    }

    /// Assembles `W(θ;x)` and `(∂_f W)(θ;x)` at a stored point.
    fn w_and_dw(&self, theta: &DVector<f64>, pd: &PointData) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut w = DMatrix::zeros(n, n);
        let mut dw = DMatrix::zeros(n, n);
        for (p_idx, &(i, j)) in self.pairs.iter().enumerate() {
            let mut wv = 0.0;
            let mut dv = 0.0;
            for k in 0..self.nb_w {
                let th = theta[p_idx * self.nb_w + k];
                wv += th * pd.mono_w[k];
                dv += th * pd.dmono_w[k];
            }
            w[(i, j)] = wv;
            w[(j, i)] = wv;
            dw[(i, j)] = dv;
            dw[(j, i)] = dv;
        }
        (w, dw)
    }

    fn rho_value(&self, theta: &DVector<f64>, pd: &PointData) -> f64 {
        let base = self.pairs.len() * self.nb_w;
        (0..self.nb_rho).map(|k| theta[base + k] * pd.mono_rho[k]).sum()
    }

    /// Condition matrix `F(θ;x) = -∂_f W + J W + W J' - ρ BB' + 2λ W`.
    fn condition_matrix(&self, theta: &DVector<f64>, pd: &PointData) -> DMatrix<f64> {
        let (w, dw) = self.w_and_dw(theta, pd);
        let jw = &pd.j * &w;
        let rho = self.rho_value(theta, pd);
        let mut f = &jw + jw.transpose() - dw + 2.0 * self.lambda * &w;
        f -= rho * &pd.bbt;
        f
    }

    /// Per-point objective contribution and its active branch.
    fn point_value(&self, theta: &DVector<f64>, pd: &PointData) -> (f64, Branch) {
        let (w, dw) = self.w_and_dw(theta, pd);
        let jw = &pd.j * &w;
        let rho = self.rho_value(theta, pd);
        let mut f = &jw + jw.transpose() - dw + 2.0 * self.lambda * &w;
        f -= rho * &pd.bbt;
        let lmi = sym_eig_max(&f) + self.eps;
        let pos = self.alpha1 - sym_eig_min(&w);
        if lmi >= pos {
            (lmi, Branch::Lmi)
        } else {
            (pos, Branch::Positivity)
        }
    }

    /// Full objective with deterministic argmax.
    fn phi(&self, theta: &DVector<f64>) -> (f64, usize, Branch) {
        self.points
            .par_iter()
            .enumerate()
            .map(|(i, pd)| {
                let (v, br) = self.point_value(theta, pd);
                (v, i, br)
            })
            .reduce(
                || (f64::NEG_INFINITY, usize::MAX, Branch::Lmi),
                |a, b| {
                    if a.0 > b.0 || (a.0 == b.0 && a.1 < b.1) {
                        a
                    } else {
                        b
                    }
                },
            )
    }

    /// Subgradient of the active branch at a point, pulled back to θ.
    fn subgradient(&self, theta: &DVector<f64>, point_idx: usize, branch: Branch) -> DVector<f64> {
        let pd = &self.points[point_idx];
        let dim = self.pairs.len() * self.nb_w + self.nb_rho;
        let mut g = DVector::zeros(dim);
        match branch {
            Branch::Lmi => {
                let f = self.condition_matrix(theta, pd);
                let (_, v) = top_eigpair(&f);
                let a = pd.j.transpose() * &v; // a_i = (J'v)_i
                let bv = &pd.bbt * &v;
                let vbbv = v.dot(&bv);
                for (p_idx, &(i, j)) in self.pairs.iter().enumerate() {
                    let s_v = if i == j { v[i] * v[i] } else { 2.0 * v[i] * v[j] };
                    let jterm = if i == j {
                        2.0 * a[i] * v[i]
                    } else {
                        2.0 * (a[i] * v[j] + a[j] * v[i])
                    };
                    for k in 0..self.nb_w {
                        g[p_idx * self.nb_w + k] =
                            -pd.dmono_w[k] * s_v + pd.mono_w[k] * (jterm + 2.0 * self.lambda * s_v);
                    }
                }
                let base = self.pairs.len() * self.nb_w;
                for k in 0..self.nb_rho {
                    g[base + k] = -pd.mono_rho[k] * vbbv;
                }
            }
            Branch::Positivity => {
                let (w, _) = self.w_and_dw(theta, pd);
                let (_, v) = top_eigpair(&(-w)); // eigenvector of λ_min(W)
                for (p_idx, &(i, j)) in self.pairs.iter().enumerate() {
                    let s_v = if i == j { v[i] * v[i] } else { 2.0 * v[i] * v[j] };
                    for k in 0..self.nb_w {
                        g[p_idx * self.nb_w + k] = -pd.mono_w[k] * s_v;
                    }
                }
            }
        }
        g
    }
}

/// Closed-form extreme eigenvalues for symmetric 1×1..3×3, nalgebra fallback
/// above. The final verification path never uses these.
fn sym_eig_max(a: &DMatrix<f64>) -> f64 {
    sym_eig_extremes(a).1
}

fn sym_eig_min(a: &DMatrix<f64>) -> f64 {
    sym_eig_extremes(a).0
}

fn sym_eig_extremes(a: &DMatrix<f64>) -> (f64, f64) {
    match a.nrows() {
        0 => (f64::INFINITY, f64::NEG_INFINITY),
        1 => (a[(0, 0)], a[(0, 0)]),
        2 => {
            let (p, q, r) = (a[(0, 0)], a[(1, 1)], 0.5 * (a[(0, 1)] + a[(1, 0)]));
            let mean = 0.5 * (p + q);
            let disc = (0.25 * (p - q) * (p - q) + r * r).max(0.0).sqrt();
            (mean - disc, mean + disc)
        }
        3 => {
            let a11 = a[(0, 0)];
            let a22 = a[(1, 1)];
            let a33 = a[(2, 2)];
            let a12 = 0.5 * (a[(0, 1)] + a[(1, 0)]);
            let a13 = 0.5 * (a[(0, 2)] + a[(2, 0)]);
            let a23 = 0.5 * (a[(1, 2)] + a[(2, 1)]);
            let p1 = a12 * a12 + a13 * a13 + a23 * a23;
            if p1 == 0.0 {
                let lo = a11.min(a22).min(a33);
                let hi = a11.max(a22).max(a33);
                return (lo, hi);
            }
            let q = (a11 + a22 + a33) / 3.0;
            let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            let b11 = (a11 - q) / p;
            let b22 = (a22 - q) / p;
            let b33 = (a33 - q) / p;
            let b12 = a12 / p;
            let b13 = a13 / p;
            let b23 = a23 / p;
            let det_b = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13)
                + b13 * (b12 * b23 - b22 * b13);
            let r = (det_b / 2.0).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let hi = q + 2.0 * p * phi.cos();
            let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
            (lo, hi)
        }
        _ => {
            let eig = a.clone().symmetric_eigen().eigenvalues;
            (
                eig.iter().cloned().fold(f64::INFINITY, f64::min),
                eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        }
    }
}

/// The symmetric-matrix-valued affine map `θ ↦ F(θ;x)` at one grid point.
pub struct LmiMap {
    ws: Workspace,
}

impl LmiMap {
    pub fn theta_dim(&self) -> usize {
        self.ws.pairs.len() * self.ws.nb_w + self.ws.nb_rho
    }

    pub fn eval(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.ws.condition_matrix(theta, &self.ws.points[0])
    }
}

/// Builds the affine condition map at a single state inside the grid box.
pub fn assemble_lmi(prob: &SynthesisProblem, x: &[f64]) -> Result<LmiMap> {
    if !prob.grid.bounds.contains(x) {
        return Err(CcmError::InvalidArgument(format!("point {x:?} is outside the grid box")));
    }
    let mut ws = Workspace::build_point_free(prob);
    let pd = ws.point_at(prob, x);
    ws.points = vec![pd];
    Ok(LmiMap { ws })
}

impl Workspace {
    /// Workspace skeleton without grid points (scaling metadata only).
    fn build_point_free(prob: &SynthesisProblem) -> Workspace {
        Workspace {
            points: Vec::new(),
            pairs: prob.pairs(),
            nb_w: prob.w_basis.len(),
            nb_rho: prob.rho_basis.len(),
            n: prob.n(),
            lambda: prob.lambda,
            eps: prob.margin,
            alpha1: prob.alpha1_floor,
        }
    }

    fn point_at(&self, prob: &SynthesisProblem, x: &[f64]) -> PointData {
        let sigma = prob.grid.bounds.half_widths();
        let n = prob.n();
        let jac = jacobian(prob.sys.f());
        let bbt = prob.sys.b().matmul(&prob.sys.b().transpose());
        let f = prob.sys.f();
        let mono_w: Vec<f64> = prob
            .w_basis
            .iter()
            .map(|exps| {
                let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }]).unwrap();
                p.eval(x) / scale_of(exps, &sigma)
            })
            .collect();
        let dmono_w: Vec<f64> = prob
            .w_basis
            .iter()
            .map(|exps| {
                let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }]).unwrap();
                let mut dp = PolyExpr::zero(n);
                for (jv, fj) in f.iter().enumerate() {
                    dp = dp.add(&p.partial(jv).mul(fj));
                }
                dp.eval(x) / scale_of(exps, &sigma)
            })
            .collect();
        let mono_rho: Vec<f64> = prob
            .rho_basis
            .iter()
            .map(|exps| {
                let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }]).unwrap();
                p.eval(x) / scale_of(exps, &sigma)
            })
            .collect();
        PointData { mono_w, dmono_w, j: jac.eval(x), bbt: bbt.eval(x), mono_rho }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisStatus {
    /// Margin achieved and re-verified on the refined grid.
    Feasible,
    /// Best candidate returned, but the refined-grid margin is not positive.
    Infeasible,
    /// Degenerate grid: nothing was certified.
    Unverified,
}

/// Outcome of a synthesis run, re-verified on a refined grid.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub w: PolyMatrix,
    pub rho: PolyExpr,
    pub lambda: f64,
    pub status: SynthesisStatus,
    /// `-max_eig` of the independent multiplier-form check on the refined
    /// verification grid.
    pub achieved_margin: f64,
    /// Grid-certified `(alpha1, alpha2)` bounds of `W`, when positive.
    pub bounds: Option<(f64, f64)>,
    pub rho_report: CheckReport,
    pub killing_report: CheckReport,
    pub iterations: usize,
    pub solve_time_s: f64,
    pub seed: u64,
    /// Final value of the synthesis objective φ (negative when the synthesis
    /// grid margin was met).
    pub phi: f64,
}

impl SynthesisResult {
    /// The certified dual metric; only available for feasible results.
    pub fn dual_metric(&self, bounds: crate::grid::BoxBounds) -> Result<DualMetric> {
        let (a1, a2) = self.bounds.ok_or_else(|| {
            CcmError::Infeasible("no certified eigenvalue bounds; synthesis was not feasible".into())
        })?;
        DualMetric::new(self.w.clone(), a1, a2, bounds)
    }

    pub fn multiplier(&self) -> Multiplier {
        Multiplier::new(self.rho.clone())
    }
}

/// Null-space reparametrization of `{θ : C θ = d}`: returns a particular
/// solution and an orthonormal basis of the null space (Gram–Schmidt on the
/// constraint rows, then a coordinate-basis completion).
fn affine_solution_space(c: &DMatrix<f64>, d: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = c.ncols();
    if c.nrows() == 0 {
        return Ok((DVector::zeros(dim), DMatrix::identity(dim, dim)));
    }
    let svd = c.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * smax.max(1.0);
    let theta_p = svd
        .solve(d, tol)
        .map_err(|e| CcmError::Singular(format!("anchor system solve failed: {e}")))?;
    let resid = (c * &theta_p - d).norm();
    if resid > 1e-8 * (1.0 + d.norm()) {
        return Err(CcmError::Infeasible(format!("anchor constraints are inconsistent (residual {resid})")));
    }
    let mut row_basis: Vec<DVector<f64>> = Vec::new();
    for r in 0..c.nrows() {
        let mut v: DVector<f64> = c.row(r).transpose();
        for q in &row_basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        // re-orthogonalize once for numerical hygiene
        for q in &row_basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if norm > 1e-10 * c.row(r).norm().max(1.0) {
            row_basis.push(v / norm);
        }
    }
    let rank = row_basis.len();
    let mut null_cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..dim {
        if null_cols.len() == dim - rank {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[j] = 1.0;
        for q in row_basis.iter().chain(null_cols.iter()) {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        for q in row_basis.iter().chain(null_cols.iter()) {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            null_cols.push(v / norm);
        }
    }
    if null_cols.len() != dim - rank {
        return Err(CcmError::Singular("failed to complete the anchor null space".into()));
    }
    let mut null = DMatrix::zeros(dim, dim - rank);
    for (k, v) in null_cols.iter().enumerate() {
        null.set_column(k, v);
    }
    Ok((theta_p, null))
}

fn anchor_system(prob: &SynthesisProblem) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = prob.theta_dim();
    let Some(anchor) = &prob.anchor else {
        return Ok((DMatrix::zeros(0, dim), DVector::zeros(0)));
    };
    let n = prob.n();
    if anchor.x0.len() != n || anchor.w0.nrows() != n || anchor.w0.ncols() != n {
        return Err(CcmError::DimensionMismatch("anchor dimensions must match the state dimension".into()));
    }
    let sigma = prob.grid.bounds.half_widths();
    let pairs = prob.pairs();
    let nb_w = prob.w_basis.len();
    let rows = pairs.len() + 1;
    let mut c = DMatrix::zeros(rows, dim);
    let mut d = DVector::zeros(rows);
    for (p_idx, &(i, j)) in pairs.iter().enumerate() {
        for (k, exps) in prob.w_basis.iter().enumerate() {
            let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }])?;
            c[(p_idx, p_idx * nb_w + k)] = p.eval(&anchor.x0) / scale_of(exps, &sigma);
        }
        d[p_idx] = anchor.w0[(i, j)];
    }
    let base = pairs.len() * nb_w;
    for (k, exps) in prob.rho_basis.iter().enumerate() {
        let p = PolyExpr::new(n, vec![Term { coeff: 1.0, exps: exps.clone() }])?;
        c[(rows - 1, base + k)] = p.eval(&anchor.x0) / scale_of(exps, &sigma);
    }
    d[rows - 1] = anchor.rho0;
    Ok((c, d))
}

/// Searches for `(W, ρ)` meeting the multiplier-form condition with margin on
/// the synthesis grid, then re-verifies on a refined grid through the
/// independent checker. Returns the best candidate with its status.
pub fn synthesize(prob: &SynthesisProblem) -> Result<SynthesisResult> {
    let t_start = std::time::Instant::now();
    let opts = &prob.options;
    let ws = Workspace::build(prob);
    let (c, d) = anchor_system(prob)?;
    let (theta_p, null) = affine_solution_space(&c, &d)?;
    let nz = null.ncols();
    if nz == 0 {
        return Err(CcmError::Infeasible("anchors pin every coefficient; nothing to optimize".into()));
    }

    // initialization: (W, ρ) = (I, 1) projected onto the anchor subspace
    let theta_id = prob
        .theta_from_parts(&PolyMatrix::identity(prob.n(), prob.n()), &PolyExpr::one(prob.n()))
        .unwrap_or_else(|_| DVector::zeros(prob.theta_dim()));
    let mut z = null.transpose() * (&theta_id - &theta_p);

    let mut rng = StdRng::seed_from_u64(opts.seed);
    let theta_of = |z: &DVector<f64>| &theta_p + &null * z;

    let mut best_phi = f64::INFINITY;
    let mut best_z = z.clone();
    let mut restarts_used = 0usize;
    let mut iterations = 0usize;

    // Polyak-style steps with an adaptive level: target = best - δ, with δ
    // halved whenever a window passes without enough progress. A fixed
    // just-below-zero target would take O((G·d/ε)²) iterations from a far
    // infeasible start.
    let theta0 = theta_of(&z);
    let (phi0, _, _) = ws.phi(&theta0);
    let delta0 = 0.25 * phi0.abs().max(1.0);
    let mut delta = delta0;
    let delta_floor = 0.05 * prob.margin;
    let window = 120usize.min(opts.stall_window.max(1));
    let mut window_start_best = f64::INFINITY;
    let mut window_count = 0usize;

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let theta = theta_of(&z);
        let (phi, point_idx, branch) = ws.phi(&theta);
        if phi < best_phi {
            best_phi = phi;
            best_z = z.clone();
        }
        window_count += 1;
        if window_count >= window {
            let progress = window_start_best - best_phi;
            if progress < 0.25 * delta {
                delta *= 0.5;
            } else if progress > delta {
                delta *= 1.5;
            }
            window_count = 0;
            window_start_best = best_phi;
            if delta < delta_floor {
                // converged as far as the level scheme will go
                if best_phi <= 0.0 || restarts_used >= opts.restarts {
                    break;
                }
                restarts_used += 1;
                delta = 0.25 * delta0;
                let scale = 0.1 * (1.0 + best_z.norm());
                z = &best_z + DVector::from_fn(nz, |_, _| rng.random_range(-1.0..1.0)) * scale;
                continue;
            }
        } else if window_count == 1 {
            window_start_best = best_phi;
        }
        let g_theta = ws.subgradient(&theta, point_idx, branch);
        let g = null.transpose() * g_theta;
        let gnorm2 = g.norm_squared();
        if gnorm2 <= 1e-30 {
            break;
        }
        let target = best_phi - delta;
        let step = (phi - target).max(0.0) / gnorm2;
        z -= step * g;
    }

    // l¹ sparsification inside the feasible region, guarded by half the slack
    let mut l1_best = f64::INFINITY;
    if best_phi <= 0.0 && opts.l1_iters > 0 {
        let guard = 0.5 * best_phi;
        let w_scales = prob.w_scales();
        let rho_scales = prob.rho_scales();
        let scales: Vec<f64> = {
            let mut s: Vec<f64> = Vec::with_capacity(prob.theta_dim());
            for _ in 0..prob.pairs().len() {
                s.extend_from_slice(&w_scales);
            }
            s.extend_from_slice(&rho_scales);
            s
        };
        let l1_of = |theta: &DVector<f64>| -> f64 {
            theta.iter().zip(&scales).map(|(t, s)| t.abs() / s).sum()
        };
        let mut z_cur = best_z.clone();
        l1_best = l1_of(&theta_of(&z_cur));
        let mut eta = 0.05 * (1.0 + z_cur.norm());
        for _ in 0..opts.l1_iters {
            let theta = theta_of(&z_cur);
            let g_theta = DVector::from_fn(prob.theta_dim(), |k, _| theta[k].signum() / scales[k]);
            let g = null.transpose() * g_theta;
            let gn = g.norm();
            if gn <= 1e-14 {
                break;
            }
            let cand = &z_cur - (eta / gn) * &g;
            let theta_cand = theta_of(&cand);
            let (phi_cand, _, _) = ws.phi(&theta_cand);
            if phi_cand <= guard && l1_of(&theta_cand) < l1_best {
                l1_best = l1_of(&theta_cand);
                z_cur = cand;
            } else {
                eta *= 0.5;
                if eta < 1e-10 {
                    break;
                }
            }
        }
        best_z = z_cur;
    }
    let _ = l1_best;

    let theta_final = theta_of(&best_z);
    let (phi_final, _, _) = ws.phi(&theta_final);
    let (w, rho) = prob.parts_from_theta(&theta_final)?;

    // independent verification on the refined grid
    let verify_grid = prob.grid.refine(opts.verify_refine.max(1));
    let rho_report = check_ccm_rho(&prob.sys, &w, &rho, prob.lambda, &verify_grid);
    let killing_report = check_killing(&prob.sys, &w, &verify_grid);
    let bounds = verify_bounds(&w, &verify_grid).ok();
    let achieved_margin = -rho_report.value;

    let status = if prob.grid.is_degenerate() {
        SynthesisStatus::Unverified
    } else if achieved_margin > 0.0 && killing_report.holds && bounds.is_some() {
        SynthesisStatus::Feasible
    } else {
        SynthesisStatus::Infeasible
    };

    Ok(SynthesisResult {
        w,
        rho,
        lambda: prob.lambda,
        status,
        achieved_margin,
        bounds,
        rho_report,
        killing_report,
        iterations,
        solve_time_s: t_start.elapsed().as_secs_f64(),
        seed: opts.seed,
        phi: phi_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxBounds;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn planar_problem() -> SynthesisProblem {
        let sys = ControlAffineSystem::parse(2, 1, &["-x1 - x1^3 + x2^2", "0"], &["0", "1"]).unwrap();
        let grid = GridSpec::uniform(BoxBounds::centered(1.5, 2), 9).unwrap();
        SynthesisProblem::new(
            sys,
            0.1,
            grid,
            monomials(2, 2, &[0]), // W may depend on x1 only (Killing with B = e2)
            monomials(2, 2, &[1]),
            1e-3,
            0.05,
        )
        .unwrap()
    }

    #[test]
    fn monomial_enumeration() {
        let ms = monomials(2, 2, &[0, 1]);
        assert_eq!(ms.len(), 6); // 1, x1, x2, x1², x1x2, x2²
        assert_eq!(ms[0], vec![0, 0]);
        let ms_restricted = monomials(3, 2, &[0]);
        assert_eq!(ms_restricted.len(), 3); // 1, x1, x1²
    }

    #[test]
    fn c2_violating_basis_rejected() {
        let sys = ControlAffineSystem::parse(2, 1, &["-x1", "0"], &["0", "1"]).unwrap();
        let grid = GridSpec::uniform(BoxBounds::centered(1.0, 2), 5).unwrap();
        let bad = SynthesisProblem::new(
            sys,
            0.1,
            grid,
            monomials(2, 2, &[0, 1]), // x2-dependence violates C2 for B = e2
            vec![vec![0, 0]],
            1e-3,
            0.1,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn lmi_map_matches_independent_checker() {
        let prob = planar_problem();
        let w = PolyMatrix::identity(2, 2);
        let rho = PolyExpr::parse("1 + 2*x2^2", 2).unwrap();
        // ρ basis in this problem is x1-only; assemble with a basis that
        // contains the x2² monomial instead
        let prob = SynthesisProblem::new(
            prob.sys.clone(),
            0.1,
            prob.grid.clone(),
            prob.w_basis.clone(),
            monomials(2, 2, &[1]),
            1e-3,
            0.05,
        )
        .unwrap();
        let theta = prob.theta_from_parts(&w, &rho).unwrap();
        let map = assemble_lmi(&prob, &[0.0, 0.0]).unwrap();
        let f = map.eval(&theta);
        let oracle = crate::certify::ccm_rho_matrix_at(&prob.sys, &w, &rho, 0.1, &[0.0, 0.0]);
        assert_relative_eq!(f, oracle, epsilon = 1e-12);
        assert_relative_eq!(f, DMatrix::from_row_slice(2, 2, &[-1.8, 0.0, 0.0, -0.8]), epsilon = 1e-12);
    }

    #[test]
    fn lmi_map_is_linear() {
        let prob = planar_problem();
        let map = assemble_lmi(&prob, &[0.5, -1.0]).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let theta = DVector::from_fn(prob.theta_dim(), |_, _| rng.random_range(-1.0..1.0));
        let zero = DVector::zeros(prob.theta_dim());
        assert_eq!(map.eval(&zero).norm(), 0.0);
        assert_relative_eq!(map.eval(&(2.0 * &theta)), 2.0 * map.eval(&theta), epsilon = 1e-12);
    }

    #[test]
    fn theta_round_trip() {
        let prob = planar_problem();
        let w = PolyMatrix::parse(2, 2, 2, &["1 + 0.5*x1^2", "0.25*x1", "0.25*x1", "2"]).unwrap();
        let rho = PolyExpr::parse("3 + x2 - 0.5*x2^2", 2).unwrap();
        let theta = prob.theta_from_parts(&w, &rho).unwrap();
        let (w2, rho2) = prob.parts_from_theta(&theta).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(w.get(i, j).sub(w2.get(i, j)).is_zero_within(1e-12));
            }
        }
        assert!(rho.sub(&rho2).is_zero_within(1e-12));
    }

    #[test]
    fn theta_from_parts_rejects_stray_monomials() {
        let prob = planar_problem();
        let w = PolyMatrix::parse(2, 2, 2, &["1 + x2^2", "0", "0", "1"]).unwrap();
        assert!(prob.theta_from_parts(&w, &PolyExpr::one(2)).is_err());
    }

    #[test]
    fn objective_is_convex() {
        let prob = planar_problem();
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..15 {
            let t1 = DVector::from_fn(prob.theta_dim(), |_, _| rng.random_range(-2.0..2.0));
            let t2 = DVector::from_fn(prob.theta_dim(), |_, _| rng.random_range(-2.0..2.0));
            let lam: f64 = rng.random_range(0.0..1.0);
            let mix = lam * &t1 + (1.0 - lam) * &t2;
            let lhs = prob.objective(&mix);
            let rhs = lam * prob.objective(&t1) + (1.0 - lam) * prob.objective(&t2);
            assert!(lhs <= rhs + 1e-9, "convexity violated: {lhs} > {rhs}");
        }
    }

    #[test]
    fn scalar_stable_system_is_feasible() {
        let sys = ControlAffineSystem::parse(1, 1, &["-x1"], &["1"]).unwrap();
        let grid = GridSpec::uniform(BoxBounds::centered(1.0, 1), 7).unwrap();
        let prob = SynthesisProblem::new(
            sys,
            0.5,
            grid,
            vec![vec![0]],
            vec![vec![0]],
            1e-3,
            0.1,
        )
        .unwrap();
        let res = synthesize(&prob).unwrap();
        assert_eq!(res.status, SynthesisStatus::Feasible);
        assert!(res.achieved_margin > 0.0);
        // cross-module oracle on the refined grid
        let verify = prob.grid.refine(2);
        let rep = check_ccm_rho(&prob.sys, &res.w, &res.rho, prob.lambda, &verify);
        assert!(rep.holds);
    }

    #[test]
    fn unactuated_unstable_scalar_is_infeasible() {
        let sys = ControlAffineSystem::parse(1, 0, &["x1"], &[]).unwrap();
        let grid = GridSpec::uniform(BoxBounds::centered(1.0, 1), 5).unwrap();
        let prob = SynthesisProblem::new(
            sys,
            0.0_f64.max(1e-9), // rate ~ 0
            grid,
            vec![vec![0]],
            vec![vec![0]],
            1e-3,
            0.1,
        )
        .unwrap()
        .with_options(SolverOptions { max_iter: 3000, restarts: 1, ..Default::default() });
        let res = synthesize(&prob).unwrap();
        assert_eq!(res.status, SynthesisStatus::Infeasible);
    }

    #[test]
    fn anchors_hold_exactly() {
        let sys = ControlAffineSystem::parse(2, 1, &["-x1 + x2", "-x2"], &["0", "1"]).unwrap();
        let grid = GridSpec::uniform(BoxBounds::centered(2.0, 2), 9).unwrap();
        let w0 = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let prob = SynthesisProblem::new(
            sys,
            0.2,
            grid,
            monomials(2, 2, &[0]),
            monomials(2, 1, &[0]),
            1e-3,
            0.05,
        )
        .unwrap()
        .with_anchor(Anchor { x0: vec![0.0, 0.0], w0: w0.clone(), rho0: 2.0 });
        let res = synthesize(&prob).unwrap();
        let w_at_0 = res.w.eval(&[0.0, 0.0]);
        assert_relative_eq!(w_at_0, w0, epsilon = 1e-9);
        assert_relative_eq!(res.rho.eval(&[0.0, 0.0]), 2.0, epsilon = 1e-9);
        assert_eq!(res.status, SynthesisStatus::Feasible);
    }

    #[test]
    fn degenerate_grid_is_unverified() {
        let sys = ControlAffineSystem::parse(1, 1, &["-x1"], &["1"]).unwrap();
        let grid = GridSpec::new(BoxBounds::centered(1.0, 1), vec![1]).unwrap();
        let prob = SynthesisProblem::new(sys, 0.5, grid, vec![vec![0]], vec![vec![0]], 1e-3, 0.1).unwrap();
        let res = synthesize(&prob).unwrap();
        assert_eq!(res.status, SynthesisStatus::Unverified);
    }
}
