//! Minimal geodesics by direct energy minimization over discretized curves.
//!
//! A curve is N+1 nodes on a uniform parameter grid; the energy quadrature
//! uses per-segment forward-difference tangents and midpoint metric
//! evaluation. Interior nodes are optimized by descent with a memoryless
//! BFGS direction and Armijo backtracking, so the energy never exceeds the
//! energy of the initialization.

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{CcmError, Result};
use crate::metric::{riemannian_energy, riemannian_length, MetricEvaluator};
use crate::system::ControlAffineSystem;

/// An (N+1)-node curve on the uniform parameter grid `s_k = k/N`.
#[derive(Debug, Clone)]
pub struct DiscretizedCurve {
    nodes: Vec<DVector<f64>>,
}

impl DiscretizedCurve {
    /// Builds a curve from explicit nodes; needs at least two segments.
    pub fn from_nodes(nodes: Vec<DVector<f64>>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(CcmError::InvalidArgument("curves need at least 2 segments (3 nodes)".into()));
        }
        let dim = nodes[0].len();
        if nodes.iter().any(|p| p.len() != dim) {
            return Err(CcmError::DimensionMismatch("curve nodes have mixed dimensions".into()));
        }
        Ok(DiscretizedCurve { nodes })
    }

    pub fn straight_line(from: &DVector<f64>, to: &DVector<f64>, segments: usize) -> Self {
        assert!(segments >= 2, "curves need at least 2 segments");
        let nodes = (0..=segments)
            .map(|k| {
                let s = k as f64 / segments as f64;
                from * (1.0 - s) + to * s
            })
            .collect();
        DiscretizedCurve { nodes }
    }

    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn node(&self, k: usize) -> &DVector<f64> {
        &self.nodes[k]
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn start(&self) -> &DVector<f64> {
        self.nodes.first().unwrap()
    }

    pub fn end(&self) -> &DVector<f64> {
        self.nodes.last().unwrap()
    }

    /// Piecewise-linear evaluation at parameter `s ∈ [0, 1]`.
    pub fn at(&self, s: f64) -> DVector<f64> {
        let n = self.segments() as f64;
        let t = (s.clamp(0.0, 1.0)) * n;
        let k = (t.floor() as usize).min(self.segments() - 1);
        let frac = t - k as f64;
        &self.nodes[k] * (1.0 - frac) + &self.nodes[k + 1] * frac
    }

    /// Constant per-segment tangent `c_s ≈ N (x_{k+1} - x_k)`.
    pub fn tangent(&self, segment: usize) -> DVector<f64> {
        let n = self.segments() as f64;
        (&self.nodes[segment + 1] - &self.nodes[segment]) * n
    }

    /// Second-order one-sided endpoint tangents `(γ_s(0), γ_s(1))`.
    pub fn endpoint_tangents(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.segments() as f64;
        let m = self.nodes.len();
        let t0 = (-1.5 * &self.nodes[0] + 2.0 * &self.nodes[1] - 0.5 * &self.nodes[2]) * n;
        let t1 = (1.5 * &self.nodes[m - 1] - 2.0 * &self.nodes[m - 2] + 0.5 * &self.nodes[m - 3]) * n;
        (t0, t1)
    }

    /// Warm-start helper: translates the curve affinely in `s` so its
    /// endpoints land on the given pair.
    pub fn shifted_to(&self, from: &DVector<f64>, to: &DVector<f64>) -> Self {
        let n = self.segments() as f64;
        let d0 = from - self.start();
        let d1 = to - self.end();
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let s = k as f64 / n;
                p + &d0 * (1.0 - s) + &d1 * s
            })
            .collect();
        DiscretizedCurve { nodes }
    }

    /// Maximum node distance to another curve of identical discretization.
    pub fn max_node_distance(&self, other: &Self) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Tuning for the geodesic solver.
#[derive(Debug, Clone)]
pub struct GeodesicConfig {
    pub segments: usize,
    pub max_iter: usize,
    /// Stationarity: stop when `‖∇E‖ ≤ grad_tol (1 + E)`.
    pub grad_tol: f64,
    /// Maximum relative per-segment speed deviation accepted as "converged".
    pub speed_tol: f64,
    /// Run a second, bent initialization to spot non-unique minimizers.
    pub detect_cut_locus: bool,
    /// Relative energy gap between restarts that raises the cut-locus flag.
    pub cut_locus_gap: f64,
    pub seed: u64,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        GeodesicConfig {
            segments: 32,
            max_iter: 800,
            grad_tol: 1e-6,
            speed_tol: 0.05,
            detect_cut_locus: false,
            cut_locus_gap: 0.01,
            seed: 0,
        }
    }
}

/// A computed geodesic candidate with its quadrature energy and diagnostics.
#[derive(Debug, Clone)]
pub struct GeodesicResult {
    pub curve: DiscretizedCurve,
    pub energy: f64,
    pub length: f64,
    pub converged: bool,
    /// Max relative deviation of per-segment `‖c_s‖²` from its mean.
    pub speed_variation: f64,
    /// Two distinct restarts found minimizers with an energy gap.
    pub near_cut_locus: bool,
    pub iterations: usize,
}

/// Direct energy minimizer between state pairs under a fixed metric.
#[derive(Debug, Clone)]
pub struct GeodesicSolver {
    metric: MetricEvaluator,
    pub cfg: GeodesicConfig,
}

impl GeodesicSolver {
    pub fn new(metric: MetricEvaluator, cfg: GeodesicConfig) -> Self {
        GeodesicSolver { metric, cfg }
    }

    pub fn metric(&self) -> &MetricEvaluator {
        &self.metric
    }

    /// Minimal geodesic from `from` to `to`, straight-line initialization
    /// (plus a bent restart when cut-locus detection is on).
    pub fn solve(&self, from: &DVector<f64>, to: &DVector<f64>) -> Result<GeodesicResult> {
        if (to - from).norm() == 0.0 {
            return Ok(self.degenerate(from));
        }
        let line = DiscretizedCurve::straight_line(from, to, self.cfg.segments);
        let base = self.minimize(line.clone())?;
        if !self.cfg.detect_cut_locus {
            return Ok(base);
        }
        let bent = self.bend(&line);
        match self.minimize(bent) {
            Ok(alt) => {
                let gap = (alt.energy - base.energy).abs() / base.energy.max(alt.energy).max(1e-30);
                let mut best = if alt.energy < base.energy { alt } else { base };
                if gap > self.cfg.cut_locus_gap {
                    best.near_cut_locus = true;
                }
                Ok(best)
            }
            Err(_) => Ok(base), // bent restart wandered outside the metric's domain
        }
    }

    /// Warm-started solve: initializes from a previous curve shifted to the
    /// new endpoints, falling back to the straight line if that is better.
    pub fn solve_warm(
        &self,
        from: &DVector<f64>,
        to: &DVector<f64>,
        warm: &DiscretizedCurve,
    ) -> Result<GeodesicResult> {
        if (to - from).norm() == 0.0 {
            return Ok(self.degenerate(from));
        }
        let shifted = warm.shifted_to(from, to);
        let line = DiscretizedCurve::straight_line(from, to, self.cfg.segments);
        let e_shift = riemannian_energy(&shifted, &self.metric).unwrap_or(f64::INFINITY);
        let e_line = riemannian_energy(&line, &self.metric).unwrap_or(f64::INFINITY);
        let init = if e_shift <= e_line { shifted } else { line };
        self.minimize(init)
    }

    fn degenerate(&self, at: &DVector<f64>) -> GeodesicResult {
        GeodesicResult {
            curve: DiscretizedCurve::straight_line(at, at, self.cfg.segments),
            energy: 0.0,
            length: 0.0,
            converged: true,
            speed_variation: 0.0,
            near_cut_locus: false,
            iterations: 0,
        }
    }

    fn bend(&self, line: &DiscretizedCurve) -> DiscretizedCurve {
        let mut rng = StdRng::seed_from_u64(self.cfg.seed ^ 0x9e3779b97f4a7c15);
        let n = line.segments();
        let dim = line.dim();
        let scale = 0.3 * (line.end() - line.start()).norm();
        let xi = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)) * scale;
        let nodes = line
            .nodes()
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let s = k as f64 / n as f64;
                p + &xi * (std::f64::consts::PI * s).sin()
            })
            .collect();
        DiscretizedCurve { nodes }
    }

    /// Quadrature energy and its gradient with respect to every node.
    fn energy_and_grad(&self, curve: &DiscretizedCurve) -> Result<(f64, Vec<DVector<f64>>)> {
        let n_seg = curve.segments();
        let nf = n_seg as f64;
        let dim = curve.dim();
        let mut energy = 0.0;
        let mut grad = vec![DVector::zeros(dim); n_seg + 1];
        for k in 0..n_seg {
            let (a, b) = (curve.node(k), curve.node(k + 1));
            let d = b - a;
            let mid = 0.5 * (a + b);
            let (m, m_parts) = self.metric.m_and_partials_at(mid.as_slice())?;
            let md = &m * &d;
            energy += nf * d.dot(&md);
            let mut h = DVector::zeros(dim);
            for j in 0..dim {
                h[j] = d.dot(&(&m_parts[j] * &d));
            }
            grad[k] += nf * (-2.0 * &md + 0.5 * &h);
            grad[k + 1] += nf * (2.0 * md + 0.5 * h);
        }
        Ok((energy, grad))
    }

    fn minimize(&self, init: DiscretizedCurve) -> Result<GeodesicResult> {
        let n_seg = init.segments();
        let dim = init.dim();
        let n_free = (n_seg - 1) * dim;
        let mut curve = init;
        let (mut energy, grad_full) = self.energy_and_grad(&curve)?;
        let mut grad = flatten_interior(&grad_full, dim);
        let mut prev: Option<(DVector<f64>, DVector<f64>)> = None; // (s, y)
        let mut iterations = 0;
        let mut converged_grad = grad.norm() <= self.cfg.grad_tol * (1.0 + energy);

        while !converged_grad && iterations < self.cfg.max_iter {
            iterations += 1;
            let dir = lbfgs_direction(&grad, prev.as_ref());
            let slope = grad.dot(&dir);
            let dir = if slope < 0.0 { dir } else { -grad.clone() };
            let slope = grad.dot(&dir);

            // Armijo backtracking; metric failures reject the step
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = apply_step(&curve, &dir, step, dim);
                match self.energy_and_grad(&cand) {
                    Ok((e_new, g_new)) if e_new <= energy + 1e-4 * step * slope => {
                        accepted = Some((cand, e_new, g_new, step));
                        break;
                    }
                    _ => step *= 0.5,
                }
            }
            let Some((cand, e_new, g_full_new, step)) = accepted else {
                break; // stalled: keep the best curve found so far
            };
            let g_new = flatten_interior(&g_full_new, dim);
            let s = step * &dir;
            let y = &g_new - &grad;
            prev = Some((s, y));
            curve = cand;
            energy = e_new;
            grad = g_new;
            converged_grad = grad.norm() <= self.cfg.grad_tol * (1.0 + energy);
            let _ = n_free;
        }

        let length = riemannian_length(&curve, &self.metric)?;
        let speed_variation = self.speed_variation(&curve, energy)?;
        Ok(GeodesicResult {
            converged: converged_grad && speed_variation <= self.cfg.speed_tol,
            curve,
            energy,
            length,
            speed_variation,
            near_cut_locus: false,
            iterations,
        })
    }

    fn speed_variation(&self, curve: &DiscretizedCurve, energy: f64) -> Result<f64> {
        if energy <= 0.0 {
            return Ok(0.0);
        }
        let n_seg = curve.segments();
        let mut worst: f64 = 0.0;
        for k in 0..n_seg {
            let (a, b) = (curve.node(k), curve.node(k + 1));
            let d = b - a;
            let mid = 0.5 * (a + b);
            let m = self.metric.m_at(mid.as_slice())?;
            // per-segment ‖c_s‖²; the mean over segments equals the energy
            let speed_sq = (n_seg as f64).powi(2) * d.dot(&(&m * &d));
            worst = worst.max((speed_sq - energy).abs() / energy);
        }
        Ok(worst)
    }
}

fn flatten_interior(grad: &[DVector<f64>], dim: usize) -> DVector<f64> {
    let interior = grad.len() - 2;
    let mut out = DVector::zeros(interior * dim);
    for k in 0..interior {
        for j in 0..dim {
            out[k * dim + j] = grad[k + 1][j];
        }
    }
    out
}

fn apply_step(curve: &DiscretizedCurve, dir: &DVector<f64>, step: f64, dim: usize) -> DiscretizedCurve {
    let mut nodes = curve.nodes().to_vec();
    for k in 1..nodes.len() - 1 {
        for j in 0..dim {
            nodes[k][j] += step * dir[(k - 1) * dim + j];
        }
    }
    DiscretizedCurve { nodes }
}

/// Memoryless BFGS direction from the most recent secant pair.
fn lbfgs_direction(grad: &DVector<f64>, pair: Option<&(DVector<f64>, DVector<f64>)>) -> DVector<f64> {
    match pair {
        Some((s, y)) => {
            let sy = s.dot(y);
            if sy <= 1e-14 * s.norm() * y.norm() {
                return -grad;
            }
            let rho = 1.0 / sy;
            let alpha = rho * s.dot(grad);
            let q = grad - alpha * y;
            let gamma = sy / y.dot(y);
            let r = gamma * q;
            let beta = rho * y.dot(&r);
            -(r + (alpha - beta) * s)
        }
        None => -grad,
    }
}

/// Endpoint-velocity pairing `½ dE/dt` from the first variation of energy:
/// `⟨γ_s(1), ẋ⟩_x - ⟨γ_s(0), ẋ*⟩_{x*}` (time-invariant metric, so there is
/// no explicit `∂E/∂t` term).
pub fn energy_first_variation(
    geo: &GeodesicResult,
    xdot_star: &DVector<f64>,
    xdot: &DVector<f64>,
    metric: &MetricEvaluator,
) -> Result<f64> {
    if geo.energy == 0.0 {
        return Ok(0.0);
    }
    let (t0, t1) = geo.curve.endpoint_tangents();
    let m0 = metric.m_at(geo.curve.start().as_slice())?;
    let m1 = metric.m_at(geo.curve.end().as_slice())?;
    Ok(t1.dot(&(&m1 * xdot)) - t0.dot(&(&m0 * xdot_star)))
}

/// Affine-in-`u` decomposition of the energy rate: returns `(c0, a)` with
/// `½ dE/dt = c0 + a'u` for the system `ẋ = f(x) + B(x)u` at the curve's
/// free endpoint, target endpoint velocity `ẋ*`.
pub fn energy_rate_affine(
    geo: &GeodesicResult,
    xdot_star: &DVector<f64>,
    sys: &ControlAffineSystem,
    metric: &MetricEvaluator,
) -> Result<(f64, DVector<f64>)> {
    let (t0, t1) = geo.curve.endpoint_tangents();
    let x = geo.curve.end();
    let m0 = metric.m_at(geo.curve.start().as_slice())?;
    let m1 = metric.m_at(x.as_slice())?;
    let c0 = t1.dot(&(&m1 * sys.eval_f(x))) - t0.dot(&(&m0 * xdot_star));
    let a = sys.eval_b(x).transpose() * (&m1 * &t1);
    Ok((c0, a))
}

/// CSV rows for a curve: `s`, node coordinates, and the per-segment
/// Riemannian speed (the final row repeats the last segment's speed).
pub fn curve_to_csv(curve: &DiscretizedCurve, metric: &MetricEvaluator) -> Result<String> {
    let n_seg = curve.segments();
    let dim = curve.dim();
    let mut out = String::new();
    out.push_str("s");
    for j in 0..dim {
        out.push_str(&format!(",x{}", j + 1));
    }
    out.push_str(",speed\n");
    let mut speeds = Vec::with_capacity(n_seg);
    for k in 0..n_seg {
        let d = curve.node(k + 1) - curve.node(k);
        let mid = 0.5 * (curve.node(k) + curve.node(k + 1));
        let m = metric.m_at(mid.as_slice())?;
        speeds.push((n_seg as f64) * d.dot(&(&m * &d)).max(0.0).sqrt());
    }
    for k in 0..=n_seg {
        let s = k as f64 / n_seg as f64;
        out.push_str(&format!("{s}"));
        for j in 0..dim {
            out.push_str(&format!(",{}", curve.node(k)[j]));
        }
        out.push_str(&format!(",{}\n", speeds[k.min(n_seg - 1)]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxBounds;
    use crate::metric::DualMetric;
    use crate::poly::PolyMatrix;
    use approx::assert_relative_eq;

    fn flat(n: usize) -> MetricEvaluator {
        MetricEvaluator::new(DualMetric::flat(n, BoxBounds::centered(20.0, n)))
    }

    /// 1-D metric m(x) = (1+x)². Its dual 1/(1+x)² is not polynomial, so the
    /// evaluator is built from the metric side directly.
    fn curved_1d() -> MetricEvaluator {
        let m = PolyMatrix::parse(1, 1, 1, &["1 + 2*x1 + x1^2"]).unwrap();
        MetricEvaluator::from_metric(m).unwrap()
    }

    #[test]
    fn flat_geodesic_is_straight() {
        let solver = GeodesicSolver::new(flat(2), GeodesicConfig::default());
        let from = DVector::zeros(2);
        let to = DVector::from_vec(vec![1.0, 1.0]);
        let geo = solver.solve(&from, &to).unwrap();
        assert!(geo.converged);
        assert_relative_eq!(geo.energy, 2.0, epsilon = 1e-9);
        assert_relative_eq!(geo.length, 2f64.sqrt(), epsilon = 1e-9);
        for (k, node) in geo.curve.nodes().iter().enumerate() {
            let s = k as f64 / geo.curve.segments() as f64;
            assert_relative_eq!(node[0], s, epsilon = 1e-7);
            assert_relative_eq!(node[1], s, epsilon = 1e-7);
        }
    }

    #[test]
    fn coincident_endpoints_degenerate() {
        let solver = GeodesicSolver::new(flat(3), GeodesicConfig::default());
        let p = DVector::from_vec(vec![0.4, -0.2, 1.0]);
        let geo = solver.solve(&p, &p).unwrap();
        assert_eq!(geo.energy, 0.0);
        assert!(geo.converged);
    }

    #[test]
    fn endpoints_are_pinned() {
        let solver = GeodesicSolver::new(flat(2), GeodesicConfig::default());
        let from = DVector::from_vec(vec![-1.0, 2.0]);
        let to = DVector::from_vec(vec![3.0, 0.5]);
        let geo = solver.solve(&from, &to).unwrap();
        assert!((geo.curve.start() - &from).norm() <= 1e-14);
        assert!((geo.curve.end() - &to).norm() <= 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = PolyMatrix::parse(2, 2, 2, &["1 + x1^2", "0.2*x2", "0.2*x2", "2"]).unwrap();
        let me = MetricEvaluator::new(DualMetric::new(w, 0.5, 10.0, BoxBounds::centered(3.0, 2)).unwrap());
        let solver = GeodesicSolver::new(me.clone(), GeodesicConfig { segments: 6, ..Default::default() });
        let mut curve = DiscretizedCurve::straight_line(
            &DVector::zeros(2),
            &DVector::from_vec(vec![1.0, 1.5]),
            6,
        );
        // perturb interior nodes so the gradient is non-trivial
        for k in 1..curve.nodes.len() - 1 {
            curve.nodes[k][0] += 0.1 * (k as f64).sin();
            curve.nodes[k][1] -= 0.07 * (k as f64).cos();
        }
        let (_, grad) = solver.energy_and_grad(&curve).unwrap();
        let h = 1e-6;
        for k in 1..curve.nodes.len() - 1 {
            for j in 0..2 {
                let mut cp = curve.clone();
                let mut cm = curve.clone();
                cp.nodes[k][j] += h;
                cm.nodes[k][j] -= h;
                let ep = riemannian_energy(&cp, &me).unwrap();
                let em = riemannian_energy(&cm, &me).unwrap();
                let fd = (ep - em) / (2.0 * h);
                assert_relative_eq!(grad[k][j], fd, epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn warm_start_reaches_same_minimum() {
        let w = PolyMatrix::parse(2, 2, 2, &["1 + 0.5*x1^2", "0", "0", "1"]).unwrap();
        let me = MetricEvaluator::new(DualMetric::new(w, 0.5, 10.0, BoxBounds::centered(4.0, 2)).unwrap());
        let solver = GeodesicSolver::new(me, GeodesicConfig::default());
        let from = DVector::zeros(2);
        let to1 = DVector::from_vec(vec![2.0, 1.0]);
        let to2 = DVector::from_vec(vec![2.05, 1.02]);
        let cold = solver.solve(&from, &to2).unwrap();
        let first = solver.solve(&from, &to1).unwrap();
        let warm = solver.solve_warm(&from, &to2, &first.curve).unwrap();
        assert_relative_eq!(warm.energy, cold.energy, max_relative = 1e-6);
        assert!(warm.iterations <= cold.iterations);
    }

    #[test]
    fn energy_upper_bounded_by_straight_line() {
        let w = PolyMatrix::parse(2, 2, 2, &["1 + x1^2 + x2^2", "0", "0", "2"]).unwrap();
        let me = MetricEvaluator::new(DualMetric::new(w, 0.5, 50.0, BoxBounds::centered(4.0, 2)).unwrap());
        let solver = GeodesicSolver::new(me.clone(), GeodesicConfig::default());
        let from = DVector::from_vec(vec![-2.0, 0.5]);
        let to = DVector::from_vec(vec![2.0, -1.0]);
        let line = DiscretizedCurve::straight_line(&from, &to, solver.cfg.segments);
        let e_line = riemannian_energy(&line, &me).unwrap();
        let geo = solver.solve(&from, &to).unwrap();
        assert!(geo.energy <= e_line + 1e-12);
        assert!(geo.converged);
        assert!(geo.speed_variation <= 0.05);
    }

    #[test]
    fn first_variation_flat_contraction() {
        let me = flat(2);
        let solver = GeodesicSolver::new(me.clone(), GeodesicConfig::default());
        let x_star = DVector::zeros(2);
        let x = DVector::from_vec(vec![1.2, -0.7]);
        let geo = solver.solve(&x_star, &x).unwrap();
        let xdot = -(&x - &x_star);
        let half_de = energy_first_variation(&geo, &DVector::zeros(2), &xdot, &me).unwrap();
        // flat energy E = |x|², so ½ dE/dt = -E
        assert_relative_eq!(half_de, -geo.energy, max_relative = 1e-4);
    }

    #[test]
    fn first_variation_static_endpoints_is_zero() {
        let me = flat(2);
        let solver = GeodesicSolver::new(me.clone(), GeodesicConfig::default());
        let geo = solver
            .solve(&DVector::zeros(2), &DVector::from_vec(vec![1.0, 0.3]))
            .unwrap();
        let z = DVector::zeros(2);
        assert_eq!(energy_first_variation(&geo, &z, &z, &me).unwrap(), 0.0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let me = flat(2);
        let c = DiscretizedCurve::straight_line(&DVector::zeros(2), &DVector::from_vec(vec![1.0, 0.0]), 4);
        let csv = curve_to_csv(&c, &me).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "s,x1,x2,speed");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn curved_1d_closed_form() {
        // constant Riemannian speed gives c(s) = sqrt(1 + 2 L s) - 1 with
        // L = 7.5 for endpoints 0 -> 3, hence E = L² = 56.25
        let solver = GeodesicSolver::new(
            curved_1d(),
            GeodesicConfig { segments: 64, ..Default::default() },
        );
        let geo = solver
            .solve(&DVector::zeros(1), &DVector::from_vec(vec![3.0]))
            .unwrap();
        assert!(geo.converged);
        assert_relative_eq!(geo.energy, 56.25, max_relative = 5e-3);
        assert_relative_eq!(geo.length, 7.5, max_relative = 5e-3);
        for (k, node) in geo.curve.nodes().iter().enumerate() {
            let s = k as f64 / geo.curve.segments() as f64;
            let exact = (1.0 + 15.0 * s).sqrt() - 1.0;
            assert_relative_eq!(node[0], exact, epsilon = 2e-2);
        }
        // spacing follows |c_s| ∝ 1/(1+c): widest at x = 0, shrinking toward 3
        let nodes = geo.curve.nodes();
        for k in 1..nodes.len() - 1 {
            let prev = nodes[k][0] - nodes[k - 1][0];
            let next = nodes[k + 1][0] - nodes[k][0];
            assert!(next <= prev + 1e-9, "spacing not monotone at node {k}");
        }
    }

    #[test]
    fn refinement_and_symmetry() {
        let w = PolyMatrix::parse(2, 2, 2, &["1 + x1^2", "0", "0", "2 + x2^2"]).unwrap();
        let me = MetricEvaluator::new(DualMetric::new(w, 0.5, 20.0, BoxBounds::centered(4.0, 2)).unwrap());
        let from = DVector::from_vec(vec![-1.5, 0.2]);
        let to = DVector::from_vec(vec![2.0, -1.0]);
        let s32 = GeodesicSolver::new(me.clone(), GeodesicConfig { segments: 32, ..Default::default() });
        let s64 = GeodesicSolver::new(me, GeodesicConfig { segments: 64, ..Default::default() });
        let e32 = s32.solve(&from, &to).unwrap().energy;
        let e64 = s64.solve(&from, &to).unwrap().energy;
        assert!((e32 - e64).abs() / e64 <= 0.01, "refinement gap {} vs {}", e32, e64);
        let rev = s32.solve(&to, &from).unwrap().energy;
        assert!((e32 - rev).abs() / e32 <= 1e-6, "asymmetry {} vs {}", e32, rev);
    }
}
