//! Numerical infrastructure: quadrature rules and tensor grids, smooth
//! compactly supported test functions, finite differences, convergence-order
//! estimation and seeded sampling.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// One-dimensional rules
// ---------------------------------------------------------------------------

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// three-term recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Family of a one-dimensional rule; `count` is the refinable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Single Gauss–Legendre panel with `count` nodes.
    Gauss,
    /// `count` equal panels of `order`-point Gauss–Legendre.
    CompositeGauss { order: usize },
    /// Composite midpoint rule with `count` cells.
    Midpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1D {
    pub fn new(kind: RuleKind, count: usize, a: f64, b: f64) -> Rule1D {
        assert!(count >= 1);
        match kind {
            RuleKind::Gauss => Self::gauss_panel(count, a, b),
            RuleKind::CompositeGauss { order } => {
                let h = (b - a) / count as f64;
                let mut r = Rule1D {
                    nodes: Vec::with_capacity(count * order),
                    weights: Vec::with_capacity(count * order),
                };
                for p in 0..count {
                    let panel = Self::gauss_panel(order, a + p as f64 * h, a + (p + 1) as f64 * h);
                    r.nodes.extend(panel.nodes);
                    r.weights.extend(panel.weights);
                }
                r
            }
            RuleKind::Midpoint => {
                let h = (b - a) / count as f64;
                Rule1D {
                    nodes: (0..count).map(|i| a + (i as f64 + 0.5) * h).collect(),
                    weights: vec![h; count],
                }
            }
        }
    }

    fn gauss_panel(n: usize, a: f64, b: f64) -> Rule1D {
        let (x, w) = gauss_legendre(n);
        let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
        Rule1D {
            nodes: x.iter().map(|s| m + r * s).collect(),
            weights: w.iter().map(|v| v * r).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Boxes and tensor grids
// ---------------------------------------------------------------------------

/// Axis-aligned box; for space-time boxes the last axis is time.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::argument("box bounds must have equal nonzero length"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::argument(format!("degenerate box {lo:?} .. {hi:?}")));
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v > *a && *v < *b)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Tensor-product quadrature grid over a box.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub domain: BoxDomain,
    pub kinds: Vec<RuleKind>,
    pub counts: Vec<usize>,
    pub level: usize,
    axes: Vec<Rule1D>,
}

impl QuadratureGrid {
    pub fn new(domain: BoxDomain, kinds: Vec<RuleKind>, counts: Vec<usize>) -> Result<Self> {
        if kinds.len() != domain.dim() || counts.len() != domain.dim() {
            return Err(Error::argument("one rule per axis is required"));
        }
        if counts.contains(&0) {
            return Err(Error::argument("rule sizes must be positive"));
        }
        let axes = (0..domain.dim())
            .map(|k| Rule1D::new(kinds[k], counts[k], domain.lo[k], domain.hi[k]))
            .collect();
        Ok(QuadratureGrid {
            domain,
            kinds,
            counts,
            level: 0,
            axes,
        })
    }

    /// Gauss–Legendre with the same node count on every axis.
    pub fn gauss(domain: BoxDomain, nodes_per_axis: usize) -> Result<Self> {
        let d = domain.dim();
        Self::new(domain, vec![RuleKind::Gauss; d], vec![nodes_per_axis; d])
    }

    pub fn midpoint(domain: BoxDomain, cells_per_axis: usize) -> Result<Self> {
        let d = domain.dim();
        Self::new(domain, vec![RuleKind::Midpoint; d], vec![cells_per_axis; d])
    }

    /// Doubles the refinable parameter on every axis.
    pub fn refine(&self) -> Self {
        let counts = self.counts.iter().map(|c| 2 * c).collect();
        let mut g = Self::new(self.domain.clone(), self.kinds.clone(), counts)
            .expect("refinement of a valid grid is valid");
        g.level = self.level + 1;
        g
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Rule1D::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn axis(&self, k: usize) -> &Rule1D {
        &self.axes[k]
    }

    /// Node and weight at flat index `idx` (last axis fastest).
    pub fn node(&self, mut idx: usize) -> (Vec<f64>, f64) {
        let d = self.axes.len();
        let mut p = vec![0.0; d];
        let mut w = 1.0;
        for k in (0..d).rev() {
            let m = self.axes[k].len();
            let i = idx % m;
            idx /= m;
            p[k] = self.axes[k].nodes[i];
            w *= self.axes[k].weights[i];
        }
        (p, w)
    }

    pub fn weight_sum(&self) -> f64 {
        self.axes.iter().map(|a| a.weights.iter().sum::<f64>()).product()
    }
}

/// Weighted sum of `f` over the grid: node values may be computed in
/// parallel, the reduction is serial in index order.
pub fn integrate<F>(grid: &QuadratureGrid, f: F) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let vals: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (p, w) = grid.node(i);
            w * f(&p)
        })
        .collect();
    vals.iter().sum()
}

/// Integrals of several integrands sharing an exponential weight `e^{ℓ(p)}`.
///
/// `f` returns `(ℓ(p), [g₁(p) … g_K(p)])`; the result is
/// `(shift, [∫g₁e^{ℓ−shift} … ])` with `shift = max ℓ` over the nodes where
/// some `gₖ` is nonzero, so nothing overflows.
pub fn integrate_log_weighted<const K: usize, F>(grid: &QuadratureGrid, f: F) -> (f64, [f64; K])
where
    F: Fn(&[f64]) -> (f64, [f64; K]) + Sync,
{
    let vals: Vec<(f64, f64, [f64; K])> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (p, w) = grid.node(i);
            let (l, g) = f(&p);
            (w, l, g)
        })
        .collect();
    let shift = vals
        .iter()
        .filter(|(_, _, g)| g.iter().any(|v| *v != 0.0))
        .map(|(_, l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; K];
    if !shift.is_finite() {
        return (0.0, out);
    }
    for (w, l, g) in &vals {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let e = w * (l - shift).exp();
        for k in 0..K {
            out[k] += e * g[k];
        }
    }
    (shift, out)
}

// ---------------------------------------------------------------------------
// Smooth functions with closed-form derivatives
// ---------------------------------------------------------------------------

/// Value and derivatives of a space-time function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess: Mat,
}

impl Jet {
    pub fn zero(n: usize) -> Jet {
        Jet {
            value: 0.0,
            dt: 0.0,
            grad: vec![0.0; n],
            hess: Mat::zeros(n, n),
        }
    }
}

/// A smooth function of `(x, t)` with closed-form partials to order two in
/// `x` and order one in `t`.
pub trait SmoothFunction: Sync {
    fn dim(&self) -> usize;
    fn jet(&self, x: &[f64], t: f64) -> Jet;
}

/// `β(s) = exp(−1/(1−s²))` on `(−1, 1)` with its first two derivatives.
pub fn bump1d(s: f64) -> (f64, f64, f64) {
    if s.abs() >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let q = 1.0 - s * s;
    let b = (-1.0 / q).exp();
    let g1 = -2.0 * s / (q * q);
    let g2 = -2.0 / (q * q) - 8.0 * s * s / (q * q * q);
    (b, b * g1, b * (g1 * g1 + g2))
}

#[derive(Debug, Clone, PartialEq)]
struct BumpComponent {
    center: Vec<f64>,
    half: Vec<f64>,
    amplitude: f64,
}

/// Sum of tensor-product bumps, each supported in a sub-box of `support`.
/// Axes `0..n` are space and axis `n` is time.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub support: BoxDomain,
    pub seed: Option<u64>,
    components: Vec<BumpComponent>,
}

/// A single bump filling `support_box`, or with a seed, a reproducible
/// positive combination of one to five bumps in random sub-boxes.
pub fn make_bump(support_box: BoxDomain, seed: Option<u64>) -> Result<TestFunction> {
    if support_box.dim() < 2 {
        return Err(Error::argument("space-time box needs at least one space axis"));
    }
    let d = support_box.dim();
    let components = match seed {
        None => vec![BumpComponent {
            center: support_box.center(),
            half: (0..d).map(|k| 0.5 * (support_box.hi[k] - support_box.lo[k])).collect(),
            amplitude: 1.0,
        }],
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let count = rng.gen_range(1..=5);
            (0..count)
                .map(|_| {
                    let mut center = vec![0.0; d];
                    let mut half = vec![0.0; d];
                    for k in 0..d {
                        let h0 = 0.5 * (support_box.hi[k] - support_box.lo[k]);
                        let h = h0 * rng.gen_range(0.4..1.0);
                        let c = support_box.lo[k] + h + rng.gen_range(0.0..=1.0) * 2.0 * (h0 - h);
                        center[k] = c;
                        half[k] = h;
                    }
                    BumpComponent {
                        center,
                        half,
                        amplitude: rng.gen_range(0.5..1.5),
                    }
                })
                .collect()
        }
    };
    Ok(TestFunction {
        support: support_box,
        seed,
        components,
    })
}

impl TestFunction {
    /// The zero function on a box.
    pub fn zero(support: BoxDomain) -> TestFunction {
        TestFunction {
            support,
            seed: None,
            components: Vec::new(),
        }
    }

    pub fn scaled(&self, c: f64) -> TestFunction {
        let mut out = self.clone();
        out.components.iter_mut().for_each(|b| b.amplitude *= c);
        out
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Each component as its own single-bump function supported on its box.
    pub fn split(&self) -> Vec<TestFunction> {
        self.components
            .iter()
            .map(|c| TestFunction {
                support: BoxDomain {
                    lo: c.center.iter().zip(&c.half).map(|(m, h)| m - h).collect(),
                    hi: c.center.iter().zip(&c.half).map(|(m, h)| m + h).collect(),
                },
                seed: self.seed,
                components: vec![c.clone()],
            })
            .collect()
    }

    /// Smallest box containing the support of every component (the declared
    /// support for the zero function).
    pub fn hull(&self) -> BoxDomain {
        if self.components.is_empty() {
            return self.support.clone();
        }
        let d = self.support.dim();
        let lo = (0..d)
            .map(|k| self.components.iter().map(|c| c.center[k] - c.half[k]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi = (0..d)
            .map(|k| self.components.iter().map(|c| c.center[k] + c.half[k]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        BoxDomain { lo, hi }
    }
}

impl SmoothFunction for TestFunction {
    fn dim(&self) -> usize {
        self.support.dim() - 1
    }

    fn jet(&self, x: &[f64], t: f64) -> Jet {
        let n = self.dim();
        let mut out = Jet::zero(n);
        let mut b = vec![(0.0, 0.0, 0.0); n + 1];
        for comp in &self.components {
            let mut inside = true;
            for k in 0..=n {
                let z = if k < n { x[k] } else { t };
                let h = comp.half[k];
                let (v, d1, d2) = bump1d((z - comp.center[k]) / h);
                if v == 0.0 {
                    inside = false;
                    break;
                }
                b[k] = (v, d1 / h, d2 / (h * h));
            }
            if !inside {
                continue;
            }
            let prod_except = |skip: &[usize]| -> f64 {
                (0..=n).filter(|k| !skip.contains(k)).map(|k| b[k].0).product()
            };
            let a = comp.amplitude;
            out.value += a * prod_except(&[]);
            out.dt += a * b[n].1 * prod_except(&[n]);
            for i in 0..n {
                out.grad[i] += a * b[i].1 * prod_except(&[i]);
                for j in 0..n {
                    let v = if i == j {
                        b[i].2 * prod_except(&[i])
                    } else {
                        b[i].1 * b[j].1 * prod_except(&[i, j])
                    };
                    out.hess[(i, j)] += a * v;
                }
            }
        }
        out
    }
}

/// Isotropic Gaussian `exp(−|x−c|²/(2s²))`, independent of time.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
}

impl SmoothFunction for Gaussian {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn jet(&self, x: &[f64], _t: f64) -> Jet {
        let n = self.dim();
        let s2 = self.width * self.width;
        let dx: Vec<f64> = (0..n).map(|i| x[i] - self.center[i]).collect();
        let v = self.amplitude * (-crate::linalg::dot(&dx, &dx) / (2.0 * s2)).exp();
        let mut j = Jet::zero(n);
        j.value = v;
        for i in 0..n {
            j.grad[i] = -v * dx[i] / s2;
            for k in 0..n {
                let delta = if i == k { 1.0 } else { 0.0 };
                j.hess[(i, k)] = v * (dx[i] * dx[k] / (s2 * s2) - delta / s2);
            }
        }
        j
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Fourth-order first derivative: Richardson extrapolation of central
/// differences at steps `h` and `h/2`.
pub fn richardson_first(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

/// Fourth-order second derivative by the same extrapolation.
pub fn richardson_second(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let f0 = f(x);
    let d = |h: f64| (f(x + h) - 2.0 * f0 + f(x - h)) / (h * h);
    (4.0 * d(0.5 * h) - d(h)) / 3.0
}

/// Richardson-extrapolated gradient of a scalar function.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            richardson_first(
                |s| {
                    let mut y = x.to_vec();
                    y[k] = s;
                    f(&y)
                },
                x[k],
                h,
            )
        })
        .collect()
}

/// Richardson-extrapolated Hessian of a scalar function.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Mat {
    let n = x.len();
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                richardson_second(
                    |s| {
                        let mut y = x.to_vec();
                        y[i] = s;
                        f(&y)
                    },
                    x[i],
                    h,
                )
            } else {
                let mixed = |h: f64| {
                    let e = |a: f64, b: f64| {
                        let mut y = x.to_vec();
                        y[i] += a;
                        y[j] += b;
                        f(&y)
                    };
                    (e(h, h) - e(h, -h) - e(-h, h) + e(-h, -h)) / (4.0 * h * h)
                };
                (4.0 * mixed(0.5 * h) - mixed(h)) / 3.0
            };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Convergence order
// ---------------------------------------------------------------------------

/// Least-squares slope of `ln r` against `ln h`. Any nonpositive residual
/// yields `+∞` (the method is exact at that resolution).
pub fn convergence_order(hs: &[f64], residuals: &[f64]) -> Result<f64> {
    if hs.len() != residuals.len() || hs.len() < 3 {
        return Err(Error::argument("convergence order needs at least three levels"));
    }
    if residuals.iter().any(|r| !(*r > 0.0)) {
        return Ok(f64::INFINITY);
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Order for residuals measured at `h, h/2, h/4, …`.
pub fn convergence_order_halving(residuals: &[f64]) -> Result<f64> {
    let hs: Vec<f64> = (0..residuals.len()).map(|k| 0.5_f64.powi(k as i32)).collect();
    convergence_order(&hs, residuals)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random direction times a radius uniform in `[r_min, r_max]`.
pub fn sample_shell(rng: &mut ChaCha8Rng, n: usize, r_min: f64, r_max: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let l = crate::linalg::norm(&v);
        if l > 1e-3 && l <= 1.0 {
            let r = rng.gen_range(r_min..=r_max);
            return v.iter().map(|c| c * r / l).collect();
        }
    }
}

/// Uniform point in a box.
pub fn sample_box(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..*b)).collect()
}

/// Log-uniform value in `[a, b]`, `0 < a < b`.
pub fn sample_log(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    (rng.gen_range(a.ln()..b.ln())).exp()
}

/// Order-preserving parallel map.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    items.par_iter().map(&f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_box(d: usize) -> BoxDomain {
        BoxDomain::new(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    #[test]
    fn gauss_rule_is_exact_on_polynomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for p in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p as i32)).sum();
                let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn integrate_constant_and_linear() {
        for d in 1..4 {
            let g = QuadratureGrid::gauss(unit_box(d), 5).unwrap();
            assert!((integrate(&g, |_| 1.0) - 1.0).abs() < 1e-14);
            assert!((integrate(&g, |p| p[0]) - 0.5).abs() < 1e-10);
            assert!((g.weight_sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn composite_rule_covers_interval() {
        let r = Rule1D::new(RuleKind::CompositeGauss { order: 4 }, 3, -1.0, 2.0);
        assert_eq!(r.len(), 12);
        assert!((r.weights.iter().sum::<f64>() - 3.0).abs() < 1e-14);
        assert!(r.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn bump_integral_converges_under_refinement() {
        let bx = BoxDomain::new(vec![-1.0, -1.0, 0.2], vec![1.0, 1.0, 1.8]).unwrap();
        let u = make_bump(bx.clone(), None).unwrap();
        let g = QuadratureGrid::gauss(bx, 24).unwrap();
        let a = integrate(&g, |p| u.jet(&p[..2], p[2]).value);
        let b = integrate(&g.refine(), |p| u.jet(&p[..2], p[2]).value);
        assert!((a - b).abs() < 1e-6, "{a} {b}");
    }

    #[test]
    fn bump_center_outside_and_derivatives() {
        let bx = BoxDomain::new(vec![-1.0, 0.5], vec![1.0, 1.5]).unwrap();
        let u = make_bump(bx, None).unwrap();
        assert!(u.jet(&[0.0], 1.0).value > 0.0);
        assert_eq!(u.jet(&[1.5], 1.0), Jet::zero(1));
        assert_eq!(u.jet(&[0.0], 1.6), Jet::zero(1));
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoxDomain::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn seeded_bumps_are_reproducible() {
        let bx = BoxDomain::new(vec![-1.0, -1.0, 0.5], vec![1.0, 1.0, 1.5]).unwrap();
        let a = make_bump(bx.clone(), Some(7)).unwrap();
        let b = make_bump(bx.clone(), Some(7)).unwrap();
        let c = make_bump(bx, Some(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((1..=5).contains(&a.component_count()));
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let bx = BoxDomain::new(vec![-1.0, -1.0, 0.5], vec![1.0, 1.0, 1.5]).unwrap();
        let u = make_bump(bx.clone(), Some(3)).unwrap();
        let mut r = rng(11);
        let mut checked = 0;
        while checked < 100 {
            let p = sample_box(&mut r, &[-0.9, -0.9, 0.55], &[0.9, 0.9, 1.45]);
            let j = u.jet(&p[..2], p[2]);
            if j.value.abs() < 1e-3 {
                continue;
            }
            checked += 1;
            let f = |q: &[f64]| u.jet(&q[..2], q[2]).value;
            let g = fd_gradient(&f, &p, 1e-3);
            let h = fd_hessian(&|q: &[f64]| u.jet(q, p[2]).value, &p[..2], 1e-3);
            let scale = 1.0 + j.grad.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            for (gk, jk) in g.iter().zip(&j.grad) {
                assert!((gk - jk).abs() <= 1e-5 * scale);
            }
            assert!((g[2] - j.dt).abs() <= 1e-5 * (1.0 + j.dt.abs()).max(scale));
            let hs = 1.0 + crate::linalg::max_abs(&j.hess);
            assert!(crate::linalg::max_abs(&(h - &j.hess)) <= 1e-5 * hs);
        }
    }

    #[test]
    fn convergence_order_examples() {
        let o = convergence_order_halving(&[1e-2, 2.5e-3, 6.25e-4]).unwrap();
        assert!((o - 2.0).abs() < 1e-12);
        assert_eq!(convergence_order_halving(&[0.0, 0.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(convergence_order_halving(&[1.0, 0.5]).is_err());
    }

    #[test]
    fn midpoint_rule_is_second_order() {
        let f = |p: &[f64]| (3.0 * p[0]).sin() * p[0].exp();
        let exact = {
            // ∫₀¹ eˣ sin 3x dx
            let e = 1f64.exp();
            (e * ((3f64).sin() - 3.0 * (3f64).cos()) + 3.0) / 10.0
        };
        let res: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&m| (integrate(&QuadratureGrid::midpoint(unit_box(1), m).unwrap(), f) - exact).abs())
            .collect();
        let o = convergence_order_halving(&res).unwrap();
        assert!((o - 2.0).abs() < 0.3, "order {o}");
    }

    #[test]
    fn log_weighted_integration_shifts() {
        let g = QuadratureGrid::gauss(unit_box(1), 8).unwrap();
        let (shift, [v]) = integrate_log_weighted(&g, |p| (1000.0 + p[0], [1.0]));
        let exact = (1f64.exp() - 1.0) * (1000.0 - shift).exp();
        assert!((v - exact).abs() < 1e-12 * exact);
    }

    proptest! {
        #[test]
        fn bump_vanishes_outside_support(x in -3.0..3.0f64, t in -1.0..3.0f64) {
            let bx = BoxDomain::new(vec![-1.0, 0.5], vec![1.0, 1.5]).unwrap();
            let u = make_bump(bx.clone(), Some(5)).unwrap();
            if !bx.contains(&[x, t]) {
                prop_assert_eq!(u.jet(&[x], t), Jet::zero(1));
            }
        }
    }
}
