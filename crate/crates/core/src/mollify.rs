//! Mollified coefficients `a_ε = a ∗ φ_ε` and their first two derivatives.
//!
//! Derivatives are taken on the kernel, `∂ₖa_ε = ε⁻¹∫a(x−εs)(∂ₖφ)(s)ds`, so
//! only values of `a` are needed. The convolution uses a polar (2D) or
//! spherical (3D) product rule on the unit ball: Gauss–Legendre in the radius
//! (and in `cos θ`), equispaced in the azimuth. The rule is invariant under
//! `s ↦ −s`, so first moments of the radial kernel vanish exactly.

use crate::calculus::gauss_legendre;
use crate::error::{Error, Result};
use crate::fields::{CoefficientField, EllipticityBounds};
use crate::linalg::{self, Mat};
use crate::report::{MarginPoint, MarginReport};
use std::f64::consts::PI;

#[derive(Debug, Clone)]
struct KernelNode {
    s: Vec<f64>,
    /// Quadrature weight times `φ(s)`.
    phi: f64,
    /// Quadrature weight times `∇φ(s)`.
    dphi: Vec<f64>,
    /// Quadrature weight times `∇²φ(s)`, row-major.
    d2phi: Vec<f64>,
}

/// Normalized bump `φ(s) = c·exp(−1/(1−|s|²))` on the unit ball with a fixed
/// quadrature rule.
#[derive(Debug, Clone)]
pub struct Mollifier {
    pub n: usize,
    pub epsilon: f64,
    pub radial_nodes: usize,
    pub angular_nodes: usize,
    /// `‖∇φ‖₁`, computed with the same rule.
    pub grad_l1: f64,
    nodes: Vec<KernelNode>,
}

/// Unnormalized profile with gradient and Hessian.
fn profile(s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = s.len();
    let q = 1.0 - linalg::dot(s, s);
    if q <= 0.0 {
        return (0.0, vec![0.0; n], vec![0.0; n * n]);
    }
    let v = (-1.0 / q).exp();
    let grad = s.iter().map(|c| -2.0 * c * v / (q * q)).collect();
    let mut hess = vec![0.0; n * n];
    for k in 0..n {
        for l in 0..n {
            let delta = if k == l { 1.0 } else { 0.0 };
            hess[k * n + l] = v * (-2.0 * delta / (q * q) + s[k] * s[l] * (4.0 / q.powi(4) - 8.0 / q.powi(3)));
        }
    }
    (v, grad, hess)
}

impl Mollifier {
    /// Default resolution: 48 × 16 nodes in 2D, 32 × 16 × 16 in 3D.
    pub fn new(n: usize, epsilon: f64) -> Result<Self> {
        match n {
            2 => Self::with_resolution(n, epsilon, 48, 16),
            3 => Self::with_resolution(n, epsilon, 32, 16),
            _ => Err(Error::argument(format!("mollification is implemented for n = 2, 3 (got {n})"))),
        }
    }

    pub fn with_resolution(n: usize, epsilon: f64, radial_nodes: usize, angular_nodes: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::argument("mollifier scale must be positive"));
        }
        if angular_nodes < 2 || angular_nodes % 2 == 1 {
            return Err(Error::argument("angular node count must be even"));
        }
        let (rx, rw) = gauss_legendre(radial_nodes);
        let radii: Vec<(f64, f64)> = rx.iter().zip(&rw).map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect();
        let dphi = 2.0 * PI / angular_nodes as f64;
        let azimuths: Vec<f64> = (0..angular_nodes).map(|j| (j as f64 + 0.5) * dphi).collect();
        let mut raw: Vec<(Vec<f64>, f64)> = Vec::new();
        match n {
            2 => {
                for &(r, w) in &radii {
                    for &a in &azimuths {
                        raw.push((vec![r * a.cos(), r * a.sin()], w * r * dphi));
                    }
                }
            }
            3 => {
                let (cx, cw) = gauss_legendre(angular_nodes);
                for &(r, w) in &radii {
                    for (c, wc) in cx.iter().zip(&cw) {
                        let sn = (1.0 - c * c).sqrt();
                        for &a in &azimuths {
                            raw.push((vec![r * sn * a.cos(), r * sn * a.sin(), r * c], w * r * r * wc * dphi));
                        }
                    }
                }
            }
            _ => return Err(Error::argument(format!("mollification is implemented for n = 2, 3 (got {n})"))),
        }
        let mass: f64 = raw.iter().map(|(s, w)| w * profile(s).0).sum();
        let mut grad_l1 = 0.0;
        let nodes = raw
            .into_iter()
            .map(|(s, w)| {
                let (v, g, h) = profile(&s);
                let c = w / mass;
                grad_l1 += c * linalg::norm(&g);
                KernelNode {
                    phi: c * v,
                    dphi: g.iter().map(|x| c * x).collect(),
                    d2phi: h.iter().map(|x| c * x).collect(),
                    s,
                }
            })
            .collect();
        Ok(Mollifier {
            n,
            epsilon,
            radial_nodes,
            angular_nodes,
            grad_l1,
            nodes,
        })
    }

    /// `c(n) = 4‖∇φ‖₁`, the constant in the second-derivative bounds.
    pub fn second_derivative_constant(&self) -> f64 {
        4.0 * self.grad_l1
    }

    /// Quadrature value of `∫φ`, equal to one up to rounding.
    pub fn mass(&self) -> f64 {
        self.nodes.iter().map(|k| k.phi).sum()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// `a_ε`, `∇a_ε` (`grad[k] = ∂ₖa_ε`) and `∇²a_ε` (`hess[k·n+l] = ∂ₖₗa_ε`).
#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedEval {
    pub a: Mat,
    pub grad: Vec<Mat>,
    pub hess: Vec<Mat>,
}

impl MollifiedEval {
    pub fn constant(a: Mat) -> Self {
        let n = a.nrows();
        MollifiedEval {
            a,
            grad: vec![Mat::zeros(n, n); n],
            hess: vec![Mat::zeros(n, n); n * n],
        }
    }

    pub fn grad_norm(&self, i: usize, j: usize) -> f64 {
        self.grad.iter().map(|g| g[(i, j)] * g[(i, j)]).sum::<f64>().sqrt()
    }
}

/// Evaluator for the mollified coefficients of a field.
#[derive(Clone, Copy)]
pub struct MollifiedField<'a> {
    pub field: &'a dyn CoefficientField,
    pub moll: &'a Mollifier,
}

pub fn mollify_field<'a>(field: &'a dyn CoefficientField, moll: &'a Mollifier) -> MollifiedField<'a> {
    MollifiedField { field, moll }
}

impl MollifiedField<'_> {
    pub fn eval(&self, x: &[f64], t: f64) -> Result<MollifiedEval> {
        let n = self.field.dim();
        if n != self.moll.n || x.len() != n {
            return Err(Error::argument("dimension mismatch between field, kernel and point"));
        }
        let eps = self.moll.epsilon;
        if self.field.domain().depth(x) <= eps {
            return Err(Error::domain(format!(
                "the {eps}-ball around {x:?} leaves the domain of {}",
                self.field.name()
            )));
        }
        if self.field.is_constant() {
            return Ok(MollifiedEval::constant(self.field.eval_unchecked(x, t).a));
        }
        let mut a = Mat::zeros(n, n);
        let mut grad = vec![Mat::zeros(n, n); n];
        let mut hess = vec![Mat::zeros(n, n); n * n];
        let mut y = vec![0.0; n];
        for node in &self.moll.nodes {
            for k in 0..n {
                y[k] = x[k] - eps * node.s[k];
            }
            let m = self.field.eval_unchecked(&y, t).a;
            a += &m * node.phi;
            for k in 0..n {
                grad[k] += &m * (node.dphi[k] / eps);
                for l in 0..n {
                    hess[k * n + l] += &m * (node.d2phi[k * n + l] / (eps * eps));
                }
            }
        }
        Ok(MollifiedEval { a, grad, hess })
    }
}

/// `tol − max|a_ε − a|` (entrywise) at each point; zero error is expected
/// for affine coefficients since the kernel is even with unit mass.
pub fn affine_exactness(field: &dyn CoefficientField, moll: &Mollifier, points: &[Vec<f64>], tol: f64) -> Result<MarginReport> {
    let mf = mollify_field(field, moll);
    let pts = points
        .iter()
        .map(|x| {
            let e = mf.eval(x, 0.0)?;
            let a = field.eval_unchecked(x, 0.0).a;
            Ok(MarginPoint {
                location: x.clone(),
                margin: tol - linalg::max_abs(&(&e.a - &a)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginReport::from_points("affine_exactness", pts, 0.0))
}

/// Margins of the four mollifier properties at samples with `|x| ≥ 1`:
/// (i) spectrum of `a_ε` in `[λ, Λ]`; (ii) `|∇a_ε^{ij}| ≤ M` and `≤ 2E/|x|`;
/// (iii) `|a_ε − a| ≤ 2Λ` and `≤ E/|x|`; (iv) `|∂ₖₗa_ε^{ij}| ≤ c(n)M` and
/// `≤ c(n)E/|x|` with `c(n) = 4‖∇φ‖₁`. Bounds are taken from `declared`.
pub fn verify_mollify_props(
    field: &dyn CoefficientField,
    moll: &Mollifier,
    declared: &EllipticityBounds,
    samples: &[(Vec<f64>, f64)],
    tol: f64,
) -> Result<MarginReport> {
    if samples.is_empty() {
        return Err(Error::argument("empty sample cloud"));
    }
    if let Some((x, _)) = samples.iter().find(|(x, _)| linalg::norm(x) < 1.0) {
        return Err(Error::argument(format!("decay clauses need |x| >= 1, got {x:?}")));
    }
    let mf = mollify_field(field, moll);
    let evals = crate::calculus::par_map(samples, |(x, t)| {
        mf.eval(x, *t).map(|m| (m, field.eval_unchecked(x, *t).a))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let b = declared;
    let n = field.dim();
    let cn = moll.second_derivative_constant();
    let mut cols: Vec<Vec<MarginPoint>> = vec![Vec::new(); 8];
    for ((x, t), (m, a)) in samples.iter().zip(&evals) {
        let r = linalg::norm(x);
        let mut loc = x.clone();
        loc.push(*t);
        let spec = linalg::sym_eigenvalues(&m.a);
        let mut g = 0.0_f64;
        let mut h = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                g = g.max(m.grad_norm(i, j));
                for hk in &m.hess {
                    h = h.max(hk[(i, j)].abs());
                }
            }
        }
        let d = linalg::max_abs(&(&m.a - a));
        let margins = [
            spec[0] - b.lambda,
            b.big_lambda - spec[n - 1],
            b.m - g,
            2.0 * b.e / r - g,
            2.0 * b.big_lambda - d,
            b.e / r - d,
            cn * b.m - h,
            cn * b.e / r - h,
        ];
        for (c, v) in cols.iter_mut().zip(margins) {
            c.push(MarginPoint { location: loc.clone(), margin: v });
        }
    }
    let names = [
        "i_lower",
        "i_upper",
        "ii_lipschitz",
        "ii_decay",
        "iii_uniform",
        "iii_decay",
        "iv_lipschitz",
        "iv_decay",
    ];
    Ok(MarginReport::combine(
        "mollifier_properties",
        names
            .iter()
            .zip(cols)
            .map(|(nm, c)| MarginReport::from_points(*nm, c, tol))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{rng, sample_shell};
    use crate::fields::{AffineField, ConstantField, DomainTag, RadialField};
    use rand::Rng;

    #[test]
    fn kernel_has_unit_mass() {
        for n in [2, 3] {
            let m = Mollifier::new(n, 0.5).unwrap();
            assert!((m.mass() - 1.0).abs() < 1e-12);
            assert!(m.grad_l1 > 0.0);
        }
    }

    #[test]
    fn constant_field_is_reproduced() {
        let f = ConstantField::identity(2);
        let m = Mollifier::new(2, 0.5).unwrap();
        let e = mollify_field(&f, &m).eval(&[1.0, 2.0], 0.3).unwrap();
        assert_eq!(e, MollifiedEval::constant(Mat::identity(2, 2)));
    }

    #[test]
    fn affine_field_is_reproduced() {
        let f = AffineField::example_2d();
        let m = Mollifier::new(2, 0.5).unwrap();
        let pts: Vec<Vec<f64>> = (0..50).map(|k| vec![-4.0 + 0.16 * k as f64, 3.0 - 0.1 * k as f64]).collect();
        let r = affine_exactness(&f, &m, &pts, 1e-8).unwrap();
        assert!(r.pass, "{r:?}");
        let mut g = rng(1);
        for _ in 0..50 {
            let x = [g.gen_range(-5.0..5.0), g.gen_range(-5.0..5.0)];
            let e = mollify_field(&f, &m).eval(&x, 0.0).unwrap();
            let ex = f.eval_unchecked(&x, 0.0);
            assert!(linalg::max_abs(&(&e.a - &ex.a)) <= 1e-8);
            for k in 0..2 {
                assert!(linalg::max_abs(&(&e.grad[k] - &ex.grad[k])) <= 1e-7);
            }
        }
    }

    #[test]
    fn ball_leaving_domain_is_rejected() {
        let f = ConstantField::identity_on(2, DomainTag::HalfSpace0_1);
        let m = Mollifier::new(2, 0.5).unwrap();
        assert!(matches!(mollify_field(&f, &m).eval(&[0.0, 0.4], 0.5), Err(Error::Domain(_))));
        assert!(mollify_field(&f, &m).eval(&[0.0, 1.0], 0.5).is_ok());
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let f = RadialField::new(2, 1.0, 0.5).unwrap();
        let m = Mollifier::new(2, 0.5).unwrap();
        let mf = mollify_field(&f, &m);
        let mut g = rng(2);
        for _ in 0..20 {
            let x = sample_shell(&mut g, 2, 1.0, 6.0);
            let e = mf.eval(&x, 0.7).unwrap();
            let scale = e.grad.iter().map(linalg::max_abs).fold(0.0, f64::max);
            let hscale = e.hess.iter().map(linalg::max_abs).fold(0.0, f64::max);
            let h = 1e-4;
            for k in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let ep = mf.eval(&xp, 0.7).unwrap();
                let em = mf.eval(&xm, 0.7).unwrap();
                let fd = (&ep.a - &em.a) / (2.0 * h);
                assert!(linalg::max_abs(&(fd - &e.grad[k])) <= 1e-5 * scale);
                for l in 0..2 {
                    let fd2 = (&ep.grad[l] - &em.grad[l]) / (2.0 * h);
                    assert!(linalg::max_abs(&(fd2 - &e.hess[k * 2 + l])) <= 1e-5 * hscale);
                }
            }
        }
    }

    #[test]
    fn mollification_preserves_ellipticity_floor() {
        let f = RadialField::new(2, 2.0, 0.3).unwrap();
        let m = Mollifier::new(2, 0.5).unwrap();
        let mut g = rng(3);
        for _ in 0..30 {
            let x = sample_shell(&mut g, 2, 0.0, 4.0);
            let e = mollify_field(&f, &m).eval(&x, 1.1).unwrap();
            let ball_min = (0..200)
                .map(|_| {
                    let s = sample_shell(&mut g, 2, 0.0, 0.5);
                    let y = [x[0] - s[0], x[1] - s[1]];
                    linalg::min_eigenvalue(&f.eval_unchecked(&y, 1.1).a)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(linalg::min_eigenvalue(&e.a) >= ball_min.min(1.0) - 1e-12);
        }
    }

    #[test]
    fn shrinking_epsilon_shrinks_the_error() {
        let f = RadialField::new(2, 1.5, 0.0).unwrap();
        let x = [0.8, -0.4];
        let errs: Vec<f64> = [0.5, 0.25, 0.125]
            .iter()
            .map(|&eps| {
                let m = Mollifier::new(2, eps).unwrap();
                let e = mollify_field(&f, &m).eval(&x, 0.0).unwrap();
                linalg::max_abs(&(e.a - f.eval_unchecked(&x, 0.0).a))
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn properties_hold_for_radial_field_and_fail_for_quartered_decay() {
        let f = RadialField::new(2, 1.0, 0.5).unwrap();
        let m = Mollifier::new(2, 0.5).unwrap();
        let mut g = rng(5);
        let samples: Vec<(Vec<f64>, f64)> = (0..200)
            .map(|_| (sample_shell(&mut g, 2, 1.0, 10.0), g.gen_range(0.0..2.0)))
            .collect();
        let ok = verify_mollify_props(&f, &m, &f.bounds(), &samples, 1e-9).unwrap();
        assert!(ok.pass, "{ok:#?}");
        let mut b = f.bounds();
        b.e /= 4.0;
        let bad = verify_mollify_props(&f, &m, &b, &samples, 1e-9).unwrap();
        assert!(!bad.find("ii_decay").unwrap().pass);
    }

    #[test]
    fn decay_clauses_reject_small_radius() {
        let f = ConstantField::identity(2);
        let m = Mollifier::new(2, 0.5).unwrap();
        assert!(verify_mollify_props(&f, &m, &f.bounds(), &[(vec![0.5, 0.0], 0.5)], 1e-9).is_err());
    }
}
