//! Quadrature checks of the weighted integral identity for `P = ∂ₜ + Δ̃` and
//! of its `σ = eᵗ`, `α = 0` specialization with a smoothed multiplier `F₀`.
//!
//! All integrands share the weight `G = e^{2Φ}` and are integrated in log
//! space. The residual is `|L − R| / (S + |L| + |R|)` with
//! `S = ∫(u² + ⟨A∇u,∇u⟩ + (∂ₜu)²)G`, so it is invariant under `u ↦ cu` and
//! under the overall scale of `G`.

use crate::calculus::{convergence_order, integrate_log_weighted, QuadratureGrid, SmoothFunction, TestFunction};
use crate::error::{Error, Result};
use crate::estimates::dg_matrix;
use crate::fields::CoefficientField;
use crate::linalg::{dot, Mat};
use crate::mollify::Mollifier;
use crate::weights::{weight_eval, Variant, WeightEval, WeightParams};
use serde::Serialize;

/// Smallest admissible lower time edge of a test-function support.
pub const SUPPORT_FLOOR: f64 = 0.05;

/// Both sides of an identity. `lhs`, `rhs` and `scale` are in units of
/// `e^{log_shift}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub scale: f64,
    pub log_shift: f64,
    pub residual: f64,
}

impl IdentityResidual {
    fn from_sums(log_shift: f64, lhs: f64, rhs: f64, scale: f64) -> Result<Self> {
        if !(lhs.is_finite() && rhs.is_finite() && scale.is_finite()) {
            return Err(Error::domain("non-finite integrand in identity quadrature"));
        }
        let den = scale + lhs.abs() + rhs.abs();
        let residual = if den == 0.0 { 0.0 } else { (lhs - rhs).abs() / den };
        Ok(IdentityResidual {
            lhs,
            rhs,
            scale,
            log_shift,
            residual,
        })
    }
}

/// Gap between the imbalances `L − R` of two evaluations of the same
/// identity written with different terms on each side (the general form
/// carries `2∫|Lu|²G` on the left, the smoothed form moves it to the right),
/// normalized by the denominator of `reference` and expressed in its log
/// shift.
pub fn imbalance_gap(a: &IdentityResidual, reference: &IdentityResidual) -> f64 {
    let factor = (a.log_shift - reference.log_shift).exp();
    let gap = ((a.lhs - a.rhs) * factor - (reference.lhs - reference.rhs)).abs();
    let den = reference.scale + reference.lhs.abs() + reference.rhs.abs();
    if den == 0.0 {
        gap
    } else {
        gap / den
    }
}

/// A positive time weight `σ` with `σ′` and `σ″`.
pub trait TimeWeight: Sync {
    fn eval(&self, t: f64) -> (f64, f64, f64);
}

/// `σ(t) = e^{rate·t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpTime {
    pub rate: f64,
}

impl TimeWeight for ExpTime {
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let e = (self.rate * t).exp();
        (e, self.rate * e, self.rate * self.rate * e)
    }
}

/// Plain-number weight data at one node.
struct NodeWeight {
    a: Mat,
    div_a: Vec<f64>,
    log_g: f64,
    grad_log_g: Vec<f64>,
    dg: Mat,
    qg: f64,
    f: f64,
    f_t: f64,
    grad_f: Vec<f64>,
    grad_f_minus_f0: Vec<f64>,
    lap_f0: f64,
}

impl NodeWeight {
    fn new(w: &WeightEval) -> Self {
        let n = w.n;
        let a = w.coeff.a.clone();
        let div_a = (0..n).map(|j| (0..n).map(|i| w.coeff.grad[i][(i, j)]).sum()).collect();
        let grad_f: Vec<f64> = w.grad_f.iter().map(|p| w.val(p)).collect();
        let grad_f0: Vec<f64> = w.grad_f0.iter().map(|p| w.val(p)).collect();
        NodeWeight {
            a,
            div_a,
            log_g: w.val(&w.log_g()),
            grad_log_g: w.grad.iter().map(|p| 2.0 * w.val(p)).collect(),
            dg: dg_matrix(w).eval(w.ln_sigma),
            qg: w.val(&w.qg),
            f: w.val(&w.f),
            f_t: w.val(&w.f_t),
            grad_f_minus_f0: grad_f.iter().zip(&grad_f0).map(|(a, b)| a - b).collect(),
            grad_f,
            lap_f0: w.val(&w.lap_f0),
        }
    }

    /// `⟨Mv, v'⟩`.
    fn form(m: &Mat, v: &[f64], v2: &[f64]) -> f64 {
        let mv: Vec<f64> = (0..v.len()).map(|i| (0..v.len()).map(|j| m[(i, j)] * v[j]).sum()).collect();
        dot(&mv, v2)
    }

    /// `Pu = ∂ₜu + ∂ᵢa^{ij}∂ⱼu + a^{ij}∂ᵢⱼu`.
    fn p_u(&self, jet: &crate::calculus::Jet) -> f64 {
        let n = jet.grad.len();
        let mut s = jet.dt + dot(&self.div_a, &jet.grad);
        for i in 0..n {
            for j in 0..n {
                s += self.a[(i, j)] * jet.hess[(i, j)];
            }
        }
        s
    }
}

fn validate(u: &TestFunction, field: &dyn CoefficientField, params: &WeightParams, grid: &QuadratureGrid) -> Result<()> {
    let n = u.dim();
    if field.dim() != n || params.bounds.n != n {
        return Err(Error::argument("test function, field and weight dimensions differ"));
    }
    let sup = &u.support;
    if sup.lo[n] < SUPPORT_FLOOR {
        return Err(Error::argument(format!(
            "test-function support starts at t = {} (needs t >= {SUPPORT_FLOOR})",
            sup.lo[n]
        )));
    }
    if params.variant == Variant::Prop14 && sup.lo[n - 1] < 1.0 {
        return Err(Error::domain(format!(
            "half-space weight needs the support in x_n >= 1 (starts at {})",
            sup.lo[n - 1]
        )));
    }
    let (g, h) = (&grid.domain, u.hull());
    if g.dim() != n + 1 || (0..=n).any(|k| g.lo[k] > h.lo[k] + 1e-12 || g.hi[k] < h.hi[k] - 1e-12) {
        return Err(Error::argument("quadrature grid does not cover the test-function support"));
    }
    Ok(())
}

/// Both sides of the smoothed identity:
/// `½∫u²M₀G + ∫[2⟨D_G∇u,∇u⟩ + ⟨A∇u,∇u⟩((∂ₜG−Δ̃G)/G − F)]G
/// − ∫u⟨A∇u,∇(F−F₀)⟩G = 2∫Lu(Pu − Lu)G`
/// with `Lu = ∂ₜu − ⟨A∇u,∇log G⟩ + Fu/2` and
/// `M₀ = ∂ₜF + F((∂ₜG−Δ̃G)/G − F) + Δ̃F₀ − ⟨A∇(F−F₀),∇log G⟩`.
pub fn corollary32_residual(
    u: &TestFunction,
    field: &dyn CoefficientField,
    moll: &Mollifier,
    params: &WeightParams,
    grid: &QuadratureGrid,
) -> Result<IdentityResidual> {
    validate(u, field, params, grid)?;
    let n = u.dim();
    let (shift, [lhs, rhs, scale]) = integrate_log_weighted(grid, |p| {
        let (x, t) = (&p[..n], p[n]);
        let jet = u.jet(x, t);
        if jet.value == 0.0 && jet.dt == 0.0 && jet.grad.iter().all(|g| *g == 0.0) {
            return (f64::NEG_INFINITY, [0.0; 3]);
        }
        let w = match weight_eval(x, t, field, moll, params) {
            Ok(w) => NodeWeight::new(&w),
            Err(_) => return (0.0, [f64::NAN; 3]),
        };
        let a_du: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w.a[(i, j)] * jet.grad[j]).sum()).collect();
        let energy = dot(&a_du, &jet.grad);
        let lu = jet.dt - dot(&a_du, &w.grad_log_g) + 0.5 * w.f * jet.value;
        let pu = w.p_u(&jet);
        let m0 = w.f_t + w.f * (w.qg - w.f) + w.lap_f0 - NodeWeight::form(&w.a, &w.grad_f_minus_f0, &w.grad_log_g);
        let lhs = 0.5 * jet.value * jet.value * m0
            + 2.0 * NodeWeight::form(&w.dg, &jet.grad, &jet.grad)
            + energy * (w.qg - w.f)
            - jet.value * dot(&a_du, &w.grad_f_minus_f0);
        let rhs = 2.0 * lu * (pu - lu);
        let scale = jet.value * jet.value + energy + jet.dt * jet.dt;
        (w.log_g, [lhs, rhs, scale])
    });
    IdentityResidual::from_sums(shift, lhs, rhs, scale)
}

/// Both sides of the general identity with time weight `σ` and exponent `α`:
/// `2∫ρ|Lu|²G + ½∫ρu²MG + ∫ρ⟨A∇u,∇u⟩[(log σ/σ′)′ + (∂ₜG−Δ̃G)/G − F]G
/// + 2∫ρ⟨D_G∇u,∇u⟩G − ∫ρu⟨A∇u,∇F⟩G = 2∫ρ Lu Pu G`, where `ρ = σ^{1−α}/σ′`,
/// `Lu = ∂ₜu − ⟨A∇log G,∇u⟩ + Fu/2 − ασ′u/(2σ)` and
/// `M = (log σ/σ′)′F + ∂ₜF + (F − ασ′/σ)((∂ₜG−Δ̃G)/G − F) − ⟨A∇F,∇log G⟩`.
/// `F` and `G` are the weight's multiplier and weight.
pub fn lemma31_residual(
    u: &TestFunction,
    field: &dyn CoefficientField,
    moll: &Mollifier,
    sigma: &dyn TimeWeight,
    alpha_exp: f64,
    params: &WeightParams,
    grid: &QuadratureGrid,
) -> Result<IdentityResidual> {
    validate(u, field, params, grid)?;
    let n = u.dim();
    let t_axis = grid.axis(n);
    for &t in t_axis.nodes.iter().filter(|t| **t > u.support.lo[n] && **t < u.support.hi[n]) {
        let (s, s1, _) = sigma.eval(t);
        if !(s > 0.0) || !(s1 > 0.0) {
            return Err(Error::argument(format!("time weight needs sigma > 0 and sigma' > 0 (fails at t = {t})")));
        }
    }
    let (shift, [lhs, rhs, scale]) = integrate_log_weighted(grid, |p| {
        let (x, t) = (&p[..n], p[n]);
        let jet = u.jet(x, t);
        if jet.value == 0.0 && jet.dt == 0.0 && jet.grad.iter().all(|g| *g == 0.0) {
            return (f64::NEG_INFINITY, [0.0; 3]);
        }
        let w = match weight_eval(x, t, field, moll, params) {
            Ok(w) => NodeWeight::new(&w),
            Err(_) => return (0.0, [f64::NAN; 3]),
        };
        let (s, s1, s2) = sigma.eval(t);
        let log_rho = (1.0 - alpha_exp) * s.ln() - s1.ln();
        let r = s1 / s - s2 / s1;
        let drift = alpha_exp * s1 / s;
        let a_du: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w.a[(i, j)] * jet.grad[j]).sum()).collect();
        let energy = dot(&a_du, &jet.grad);
        let lu = jet.dt - dot(&a_du, &w.grad_log_g) + 0.5 * w.f * jet.value - 0.5 * drift * jet.value;
        let pu = w.p_u(&jet);
        let m = r * w.f + w.f_t + (w.f - drift) * (w.qg - w.f) - NodeWeight::form(&w.a, &w.grad_f, &w.grad_log_g);
        let lhs = 2.0 * lu * lu
            + 0.5 * jet.value * jet.value * m
            + energy * (r + w.qg - w.f)
            + 2.0 * NodeWeight::form(&w.dg, &jet.grad, &jet.grad)
            - jet.value * dot(&a_du, &w.grad_f);
        let rhs = 2.0 * lu * pu;
        let scale = jet.value * jet.value + energy + jet.dt * jet.dt;
        (w.log_g + log_rho, [lhs, rhs, scale])
    });
    IdentityResidual::from_sums(shift, lhs, rhs, scale)
}

/// Residuals of the smoothed identity on successively refined grids and the
/// least-squares order against the node spacing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRecord {
    pub node_counts: Vec<usize>,
    pub residuals: Vec<f64>,
    pub order: f64,
}

/// Runs `corollary32_residual` on Gauss grids over `u`'s support with the
/// given per-axis node counts (at least three).
pub fn corollary32_convergence(
    u: &TestFunction,
    field: &dyn CoefficientField,
    moll: &Mollifier,
    params: &WeightParams,
    node_counts: &[usize],
) -> Result<ConvergenceRecord> {
    let residuals = node_counts
        .iter()
        .map(|&m| {
            let grid = QuadratureGrid::gauss(u.support.clone(), m)?;
            Ok(corollary32_residual(u, field, moll, params, &grid)?.residual)
        })
        .collect::<Result<Vec<f64>>>()?;
    let hs: Vec<f64> = node_counts.iter().map(|&m| 1.0 / m as f64).collect();
    let order = convergence_order(&hs, &residuals)?;
    Ok(ConvergenceRecord {
        node_counts: node_counts.to_vec(),
        residuals,
        order,
    })
}

/// Default Gauss node count per axis: 24 for `n = 2`, 12 for `n ≥ 3`.
pub fn default_nodes(n: usize) -> usize {
    if n <= 2 {
        24
    } else {
        12
    }
}
