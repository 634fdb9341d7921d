//! Coefficient fields `a^{ij}(x, t)` with their structural bounds.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::report::{MarginPoint, MarginReport};
use serde::Serialize;

/// Ellipticity, Lipschitz and decay constants of a coefficient field:
/// `λ|ξ|² ≤ a^{ij}ξᵢξⱼ ≤ Λ|ξ|²`, `|∇a^{ij}| + |∂ₜa^{ij}| ≤ M`,
/// `|∇a^{ij}| ≤ E/|x|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipticityBounds {
    pub n: usize,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
}

impl EllipticityBounds {
    pub fn new(n: usize, lambda: f64, big_lambda: f64, m: f64, e: f64) -> Result<Self> {
        let b = EllipticityBounds {
            n,
            lambda,
            big_lambda,
            m,
            e,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n > linalg::MAX_DIM {
            return Err(Error::argument(format!("dimension {} outside 2..={}", self.n, linalg::MAX_DIM)));
        }
        if !(self.lambda > 0.0 && self.lambda <= self.big_lambda && self.big_lambda.is_finite()) {
            return Err(Error::argument(format!(
                "ellipticity bounds must satisfy 0 < lambda <= Lambda (got {}, {})",
                self.lambda, self.big_lambda
            )));
        }
        if !(self.m >= 0.0 && self.e >= 0.0) {
            return Err(Error::argument("M and E must be nonnegative"));
        }
        Ok(())
    }

    /// `κ = Λ/λ`.
    pub fn kappa(&self) -> f64 {
        self.big_lambda / self.lambda
    }
}

/// Region on which a field is defined (spatial part; time ranges are the
/// caller's responsibility).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    /// `ℝⁿ × (0, 2)`.
    WholeSpace0_2,
    /// `{xₙ > 0} × (0, 1)`.
    HalfSpace0_1,
    /// `{xₙ > 0}` for fields obtained by shifting a cone field.
    ShiftedHalfSpace,
}

impl DomainTag {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            DomainTag::WholeSpace0_2 => x.iter().all(|v| v.is_finite()),
            DomainTag::HalfSpace0_1 | DomainTag::ShiftedHalfSpace => {
                x.iter().all(|v| v.is_finite()) && x[x.len() - 1] > 0.0
            }
        }
    }

    /// Signed distance from `x` to the complement of the domain.
    pub fn depth(&self, x: &[f64]) -> f64 {
        match self {
            DomainTag::WholeSpace0_2 => f64::INFINITY,
            _ => x[x.len() - 1],
        }
    }
}

/// `A`, its spatial gradient (`grad[k] = ∂ₖA`) and its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffEval {
    pub a: Mat,
    pub grad: Vec<Mat>,
    pub dt: Mat,
}

impl CoeffEval {
    pub fn constant(a: Mat) -> Self {
        let n = a.nrows();
        CoeffEval {
            a,
            grad: vec![Mat::zeros(n, n); n],
            dt: Mat::zeros(n, n),
        }
    }

    /// `∂ᵢa^{ij}` as a vector indexed by `j`.
    pub fn divergence(&self) -> Vec<f64> {
        let n = self.a.nrows();
        (0..n).map(|j| (0..n).map(|i| self.grad[i][(i, j)]).sum()).collect()
    }

    /// Euclidean norm of `∇ₓa^{ij}`.
    pub fn grad_norm(&self, i: usize, j: usize) -> f64 {
        self.grad.iter().map(|g| g[(i, j)] * g[(i, j)]).sum::<f64>().sqrt()
    }
}

pub trait CoefficientField: Send + Sync {
    fn name(&self) -> String;
    fn bounds(&self) -> EllipticityBounds;
    fn domain(&self) -> DomainTag;

    /// Closed-form evaluation without a domain check.
    fn eval_unchecked(&self, x: &[f64], t: f64) -> CoeffEval;

    /// Fields whose coefficients never vary may be special-cased downstream.
    fn is_constant(&self) -> bool {
        false
    }

    fn dim(&self) -> usize {
        self.bounds().n
    }
}

/// Evaluates `(A, ∇A, ∂ₜA)` at `(x, t)`.
pub fn eval_coefficients(field: &dyn CoefficientField, x: &[f64], t: f64) -> Result<CoeffEval> {
    if x.len() != field.dim() {
        return Err(Error::argument(format!(
            "point of dimension {} for a field of dimension {}",
            x.len(),
            field.dim()
        )));
    }
    if !field.domain().contains(x) {
        return Err(Error::domain(format!("{x:?} lies outside the domain of {}", field.name())));
    }
    Ok(field.eval_unchecked(x, t))
}

// ---------------------------------------------------------------------------
// Built-in families
// ---------------------------------------------------------------------------

/// A constant symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub a: Mat,
    bounds: EllipticityBounds,
    domain: DomainTag,
}

impl ConstantField {
    pub fn new(a: Mat, domain: DomainTag) -> Result<Self> {
        if !linalg::is_symmetric(&a) {
            return Err(Error::argument("constant coefficient matrix must be symmetric"));
        }
        let ev = linalg::sym_eigenvalues(&a);
        if ev[0] <= 0.0 {
            return Err(Error::argument("constant coefficient matrix must be positive definite"));
        }
        let bounds = EllipticityBounds::new(a.nrows(), ev[0], *ev.last().unwrap(), 0.0, 0.0)?;
        Ok(ConstantField { a, bounds, domain })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(Mat::identity(n, n), DomainTag::WholeSpace0_2).expect("identity is SPD")
    }

    pub fn identity_on(n: usize, domain: DomainTag) -> Self {
        Self::new(Mat::identity(n, n), domain).expect("identity is SPD")
    }

    /// `R diag(1, …, 1, κ) Rᵀ` with `R` the rotation by `angle` in the
    /// `(x₁, xₙ)` plane, so `λ = 1`, `Λ = κ` and (for `angle ∉ πℤ/2`) the
    /// normal row has an off-diagonal entry.
    pub fn rotated_diagonal(n: usize, kappa: f64, angle: f64, domain: DomainTag) -> Result<Self> {
        if !(kappa >= 1.0) || n < 2 {
            return Err(Error::argument("rotated diagonal field needs kappa >= 1 and n >= 2"));
        }
        let mut d = Mat::identity(n, n);
        d[(n - 1, n - 1)] = kappa;
        let mut r = Mat::identity(n, n);
        let (c, s) = (angle.cos(), angle.sin());
        r[(0, 0)] = c;
        r[(0, n - 1)] = -s;
        r[(n - 1, 0)] = s;
        r[(n - 1, n - 1)] = c;
        let a = linalg::symmetrize(&(&r * d * r.transpose()));
        let mut f = Self::new(a, domain)?;
        f.bounds.lambda = 1.0;
        f.bounds.big_lambda = kappa;
        Ok(f)
    }

    /// Overrides the declared bounds (e.g. to test a deliberately wrong claim).
    pub fn with_bounds(mut self, bounds: EllipticityBounds) -> Self {
        self.bounds = bounds;
        self
    }
}

impl CoefficientField for ConstantField {
    fn name(&self) -> String {
        "constant".into()
    }
    fn bounds(&self) -> EllipticityBounds {
        self.bounds
    }
    fn domain(&self) -> DomainTag {
        self.domain
    }
    fn eval_unchecked(&self, _x: &[f64], _t: f64) -> CoeffEval {
        CoeffEval::constant(self.a.clone())
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// `a(x) = C + Σₖ xₖDₖ` with symmetric `C`, `Dₖ`. Used to test that
/// mollification reproduces affine coefficients; the declared bounds are
/// nominal and hold only on a bounded region.
#[derive(Debug, Clone)]
pub struct AffineField {
    pub base: Mat,
    pub slopes: Vec<Mat>,
    bounds: EllipticityBounds,
}

impl AffineField {
    pub fn new(base: Mat, slopes: Vec<Mat>, bounds: EllipticityBounds) -> Result<Self> {
        let n = base.nrows();
        if slopes.len() != n || !linalg::is_symmetric(&base) || slopes.iter().any(|d| !linalg::is_symmetric(d)) {
            return Err(Error::argument("affine field needs a symmetric base and n symmetric slopes"));
        }
        Ok(AffineField { base, slopes, bounds })
    }

    /// The planar example `C = [[3, ½], [½, 2]]`, `D₁ = [[0.3, −0.1], [−0.1, 0.2]]`,
    /// `D₂ = [[−0.2, 0.05], [0.05, 0.4]]`, positive definite for `|x| ≤ 5`.
    pub fn example_2d() -> Self {
        Self::new(
            Mat::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]),
            vec![
                Mat::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.2]),
                Mat::from_row_slice(2, 2, &[-0.2, 0.05, 0.05, 0.4]),
            ],
            EllipticityBounds {
                n: 2,
                lambda: 0.1,
                big_lambda: 10.0,
                m: 1.0,
                e: 1.0,
            },
        )
        .expect("example slopes are symmetric")
    }
}

impl CoefficientField for AffineField {
    fn name(&self) -> String {
        "affine".into()
    }
    fn bounds(&self) -> EllipticityBounds {
        self.bounds
    }
    fn domain(&self) -> DomainTag {
        DomainTag::WholeSpace0_2
    }
    fn eval_unchecked(&self, x: &[f64], _t: f64) -> CoeffEval {
        let n = self.base.nrows();
        let mut a = self.base.clone();
        for (s, xk) in self.slopes.iter().zip(x) {
            a += s * *xk;
        }
        CoeffEval {
            a,
            grad: self.slopes.clone(),
            dt: Mat::zeros(n, n),
        }
    }
}

/// Sup over `x` of `|∇(xᵢxⱼ/(1+|x|²))|`, attained on an axis at `|x| = 1/√3`.
pub const RADIAL_GRAD_SUP: f64 = 0.649_519_052_838_329; // 3√3/8

/// Synthetic radial perturbation of the identity,
/// `a = I + c·m(t)·x xᵀ/(1+|x|²)` with `m(t) = 1 + μ sin t`.
///
/// With `c ≥ 0` and `0 ≤ μ < 1` the field satisfies `λ = 1`,
/// `Λ = 1 + c(1+μ)`, `E = c(1+μ)` (the supremum of `|x||∇(xᵢxⱼ/(1+|x|²))|`
/// is 1, approached as `|x| → ∞`) and `M = c((1+μ)·3√3/8 + μ)`.
#[derive(Debug, Clone)]
pub struct RadialField {
    pub n: usize,
    pub c: f64,
    pub mu: f64,
    bounds: EllipticityBounds,
    domain: DomainTag,
}

impl RadialField {
    pub fn new(n: usize, c: f64, mu: f64) -> Result<Self> {
        if !(c >= 0.0) || !(0.0..1.0).contains(&mu) {
            return Err(Error::argument("radial field needs c >= 0 and 0 <= mu < 1"));
        }
        let amp = c * (1.0 + mu);
        let bounds = EllipticityBounds::new(
            n,
            1.0,
            1.0 + amp,
            c * ((1.0 + mu) * RADIAL_GRAD_SUP + mu),
            amp,
        )?;
        Ok(RadialField {
            n,
            c,
            mu,
            bounds,
            domain: DomainTag::WholeSpace0_2,
        })
    }

    pub fn on_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_bounds(mut self, bounds: EllipticityBounds) -> Self {
        self.bounds = bounds;
        self
    }
}

impl CoefficientField for RadialField {
    fn name(&self) -> String {
        format!("radial(c={}, mu={})", self.c, self.mu)
    }
    fn bounds(&self) -> EllipticityBounds {
        self.bounds
    }
    fn domain(&self) -> DomainTag {
        self.domain
    }
    fn eval_unchecked(&self, x: &[f64], t: f64) -> CoeffEval {
        let n = self.n;
        let q = 1.0 + linalg::dot(x, x);
        let m = 1.0 + self.mu * t.sin();
        let dm = self.mu * t.cos();
        let mut a = Mat::identity(n, n);
        let mut dt = Mat::zeros(n, n);
        let mut grad = vec![Mat::zeros(n, n); n];
        for i in 0..n {
            for j in 0..n {
                let g = x[i] * x[j] / q;
                a[(i, j)] += self.c * m * g;
                dt[(i, j)] = self.c * dm * g;
                for (k, gk) in grad.iter_mut().enumerate() {
                    let mut d = -2.0 * x[i] * x[j] * x[k] / (q * q);
                    if k == i {
                        d += x[j] / q;
                    }
                    if k == j {
                        d += x[i] / q;
                    }
                    gk[(i, j)] = self.c * m * d;
                }
            }
        }
        CoeffEval { a, grad, dt }
    }
}

// ---------------------------------------------------------------------------
// Hypothesis sampler
// ---------------------------------------------------------------------------

/// Samples the structural margins of a field:
/// `λ_min(A) − λ`, `Λ − λ_max(A)`, `M − max(|∇a^{ij}| + |∂ₜa^{ij}|)` and,
/// for `|x| ≥ 1`, `E/|x| − max|∇a^{ij}|`.
pub fn verify_structure_bounds(
    field: &dyn CoefficientField,
    samples: &[(Vec<f64>, f64)],
    tol: f64,
) -> Result<MarginReport> {
    if samples.is_empty() {
        return Err(Error::argument("empty sample cloud"));
    }
    let b = field.bounds();
    let evals = samples
        .iter()
        .map(|(x, t)| eval_coefficients(field, x, *t))
        .collect::<Result<Vec<_>>>()?;
    let n = field.dim();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut lip = Vec::new();
    let mut dec = Vec::new();
    for ((x, t), ev) in samples.iter().zip(&evals) {
        let mut loc = x.clone();
        loc.push(*t);
        let spec = linalg::sym_eigenvalues(&ev.a);
        lo.push(MarginPoint {
            location: loc.clone(),
            margin: spec[0] - b.lambda,
        });
        hi.push(MarginPoint {
            location: loc.clone(),
            margin: b.big_lambda - spec[n - 1],
        });
        let mut worst_lip = 0.0_f64;
        let mut worst_grad = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let g = ev.grad_norm(i, j);
                worst_lip = worst_lip.max(g + ev.dt[(i, j)].abs());
                worst_grad = worst_grad.max(g);
            }
        }
        lip.push(MarginPoint {
            location: loc.clone(),
            margin: b.m - worst_lip,
        });
        let r = linalg::norm(x);
        if r >= 1.0 {
            dec.push(MarginPoint {
                location: loc,
                margin: b.e / r - worst_grad,
            });
        }
    }
    Ok(MarginReport::combine(
        "structure_bounds",
        vec![
            MarginReport::from_points("ellipticity_lower", lo, tol),
            MarginReport::from_points("ellipticity_upper", hi, tol),
            MarginReport::from_points("lipschitz", lip, tol),
            MarginReport::from_points("decay", dec, tol),
        ],
    ))
}

/// Maximum relative error between the closed-form `∇A` and central
/// differences of `A` at step `h`, relative to `max(1, max|∇A|)`.
pub fn gradient_fd_error(field: &dyn CoefficientField, x: &[f64], t: f64, h: f64) -> f64 {
    let n = field.dim();
    let ev = field.eval_unchecked(x, t);
    let scale = ev.grad.iter().map(linalg::max_abs).fold(1.0_f64, f64::max);
    let mut worst = 0.0_f64;
    for k in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let fd = (field.eval_unchecked(&xp, t).a - field.eval_unchecked(&xm, t).a) / (2.0 * h);
        worst = worst.max(linalg::max_abs(&(fd - &ev.grad[k])) / scale);
    }
    let fd_t = (field.eval_unchecked(x, t + h).a - field.eval_unchecked(x, t - h).a) / (2.0 * h);
    worst.max(linalg::max_abs(&(fd_t - &ev.dt)) / scale.max(linalg::max_abs(&ev.dt)))
}
