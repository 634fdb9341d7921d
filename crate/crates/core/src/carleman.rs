//! Quadrature check of the weighted inequalities
//! `∫G(|u|² + |∇u|²) ≤ ∫G|Pu|²` for the whole-space and half-space weights,
//! `G = e^{2γ(t^{−K}−1)g(x) − (bψ(x)+K)/t}`.
//!
//! Both sides are integrated in log space and normalized by their sum, so a
//! verdict is invariant under `u ↦ cu` and under the overall scale of `G`.

use crate::calculus::{integrate_log_weighted, make_bump, BoxDomain, QuadratureGrid, SmoothFunction, TestFunction};
use crate::error::{Error, Result};
use crate::fields::{eval_coefficients, CoefficientField};
use crate::identity::SUPPORT_FLOOR;
use crate::linalg::dot;
use crate::report::{MarginPoint, MarginReport};
use crate::weights::{decay_threshold, Variant, WeightParams};
use serde::Serialize;

/// Relative slack on the right-hand side.
pub const TOL_REL: f64 = 1e-2;
/// Absolute slack on the normalized integrals.
pub const TOL_ABS: f64 = 1e-12;
/// Node contributions below `−NEGATIVE_FLOOR` are a hard error.
pub const NEGATIVE_FLOOR: f64 = 1e-14;

/// Outcome at one `γ`. `lhs` and `rhs` are normalized so that
/// `lhs + rhs = 1`; `ratio = lhs/rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaVerdict {
    pub gamma: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub log_shift: f64,
    /// `rhs(1 + tol_rel) + tol_abs − lhs`.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CarlemanTolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for CarlemanTolerance {
    fn default() -> Self {
        CarlemanTolerance {
            rel: TOL_REL,
            abs: TOL_ABS,
        }
    }
}

/// Log-weight exponent of `G`.
pub fn log_weight(params: &WeightParams, x: &[f64], t: f64) -> f64 {
    params.log_weight(x, t)
}

/// How the two weighted integrals are discretized.
#[derive(Debug, Clone)]
pub enum Integration {
    /// One tensor grid covering the support.
    Grid(QuadratureGrid),
    /// Both sides are bilinear in `u = Σuₐ`; each product `uₐu_b` is
    /// integrated on a Gauss grid with `nodes` points per axis over the
    /// intersection of the two component boxes, where it is as smooth as a
    /// single bump.
    Pairwise { nodes: usize },
}

impl Integration {
    /// Doubles the node count per axis.
    pub fn refine(&self) -> Integration {
        match self {
            Integration::Grid(g) => Integration::Grid(g.refine()),
            Integration::Pairwise { nodes } => Integration::Pairwise { nodes: 2 * nodes },
        }
    }
}

fn operator_value(c: &crate::fields::CoeffEval, jet: &crate::calculus::Jet) -> f64 {
    let n = jet.grad.len();
    let mut pu = jet.dt;
    for i in 0..n {
        for j in 0..n {
            pu += c.grad[i][(i, j)] * jet.grad[j] + c.a[(i, j)] * jet.hess[(i, j)];
        }
    }
    pu
}

/// `(shift, ∫G(uv + ∇u·∇v), ∫G·Pu·Pv)` on `grid`, in units of `e^{shift}`.
/// With `u = v` every node contribution must be nonnegative.
fn bilinear_sides(
    u: &TestFunction,
    v: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    grid: &QuadratureGrid,
) -> Result<(f64, f64, f64)> {
    let n = u.dim();
    let diagonal = std::ptr::eq(u, v);
    let (shift, [lhs, rhs]) = integrate_log_weighted(grid, |p| {
        let (x, t) = (&p[..n], p[n]);
        let ju = u.jet(x, t);
        if ju.value == 0.0 && ju.dt == 0.0 && ju.grad.iter().all(|g| *g == 0.0) {
            return (f64::NEG_INFINITY, [0.0; 2]);
        }
        let jv = if diagonal { ju.clone() } else { v.jet(x, t) };
        let c = match eval_coefficients(field, x, t) {
            Ok(c) => c,
            Err(_) => return (0.0, [f64::NAN; 2]),
        };
        let l = ju.value * jv.value + dot(&ju.grad, &jv.grad);
        let r = operator_value(&c, &ju) * operator_value(&c, &jv);
        if diagonal && (!(l >= -NEGATIVE_FLOOR) || !(r >= -NEGATIVE_FLOOR)) {
            return (0.0, [f64::NAN; 2]);
        }
        (log_weight(params, x, t), [l, r])
    });
    if !(lhs.is_finite() && rhs.is_finite()) {
        return Err(Error::domain("negative or non-finite integrand in weighted quadrature"));
    }
    Ok((shift, lhs, rhs))
}

/// `(shift, ∫G(|u|²+|∇u|²), ∫G|Pu|²)` with both integrals in units of
/// `e^{shift}`.
pub fn weighted_sides(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
) -> Result<(f64, f64, f64)> {
    let nodes = match integration {
        Integration::Grid(g) => return bilinear_sides(u, u, field, params, g),
        Integration::Pairwise { nodes } => *nodes,
    };
    let parts = u.split();
    let mut terms = Vec::new();
    for a in 0..parts.len() {
        for b in a..parts.len() {
            let (pa, pb) = (&parts[a].support, &parts[b].support);
            let lo: Vec<f64> = pa.lo.iter().zip(&pb.lo).map(|(x, y)| x.max(*y)).collect();
            let hi: Vec<f64> = pa.hi.iter().zip(&pb.hi).map(|(x, y)| x.min(*y)).collect();
            if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
                continue;
            }
            let grid = QuadratureGrid::gauss(BoxDomain::new(lo, hi)?, nodes)?;
            let (s, l, r) = bilinear_sides(&parts[a], &parts[b], field, params, &grid)?;
            let mult = if a == b { 1.0 } else { 2.0 };
            terms.push((s, mult * l, mult * r));
        }
    }
    let shift = terms
        .iter()
        .filter(|(_, l, r)| *l != 0.0 || *r != 0.0)
        .map(|(s, _, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Ok((0.0, 0.0, 0.0));
    }
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (s, l, r) in &terms {
        if *l == 0.0 && *r == 0.0 {
            continue;
        }
        let e = (s - shift).exp();
        lhs += e * l;
        rhs += e * r;
    }
    Ok((shift, lhs, rhs))
}

fn verdict(gamma: f64, shift: f64, lhs: f64, rhs: f64, tol: CarlemanTolerance) -> GammaVerdict {
    let total = lhs + rhs;
    let (l, r) = if total > 0.0 { (lhs / total, rhs / total) } else { (0.0, 0.0) };
    let margin = r * (1.0 + tol.rel) + tol.abs - l;
    GammaVerdict {
        gamma,
        lhs: l,
        rhs: r,
        ratio: if r > 0.0 { l / r } else if l > 0.0 { f64::INFINITY } else { 0.0 },
        log_shift: shift,
        margin,
        pass: margin >= 0.0,
    }
}

fn check_common(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
    variant: Variant,
) -> Result<()> {
    if params.variant != variant {
        return Err(Error::argument("weight parameters belong to the other inequality"));
    }
    if !params.calibrated {
        return Err(Error::argument(
            "d has not been calibrated for this field; run `calibrate-d` and use the returned d",
        ));
    }
    let n = u.dim();
    if field.dim() != n || params.bounds.n != n {
        return Err(Error::argument("test function, field and weight dimensions differ"));
    }
    let sup = &u.support;
    let t_max = match variant {
        Variant::Prop13 => 2.0,
        Variant::Prop14 => 1.0,
    };
    if sup.lo[n] < SUPPORT_FLOOR || sup.hi[n] > t_max {
        return Err(Error::argument(format!(
            "time support [{}, {}] must lie in [{SUPPORT_FLOOR}, {t_max}]",
            sup.lo[n], sup.hi[n]
        )));
    }
    match integration {
        Integration::Grid(grid) => {
            let (g, h) = (&grid.domain, u.hull());
            if g.dim() != n + 1 || (0..=n).any(|k| g.lo[k] > h.lo[k] + 1e-12 || g.hi[k] < h.hi[k] - 1e-12) {
                return Err(Error::argument("quadrature grid does not cover the test-function support"));
            }
        }
        Integration::Pairwise { nodes } => {
            if *nodes == 0 {
                return Err(Error::argument("node count must be positive"));
            }
        }
    }
    Ok(())
}

fn run(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
    gammas: &[f64],
    tol: CarlemanTolerance,
) -> Result<Vec<GammaVerdict>> {
    gammas
        .iter()
        .map(|&g| {
            if !(g > 0.0) {
                return Err(Error::argument("gamma must be positive"));
            }
            let (s, l, r) = weighted_sides(u, field, &params.with_gamma(g), integration)?;
            Ok(verdict(g, s, l, r, tol))
        })
        .collect()
}

/// Whole-space inequality with `b = 1/(8Λ)`, `K = 12d`.
pub fn check_inequality_12(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
    gammas: &[f64],
    tol: CarlemanTolerance,
) -> Result<Vec<GammaVerdict>> {
    check_common(u, field, params, integration, Variant::Prop13)?;
    run(u, field, params, integration, gammas, tol)
}

/// Half-space inequality on `Q = {xₙ ≥ 1, 0 < t < 1}`.
pub fn check_inequality_13(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
    gammas: &[f64],
    tol: CarlemanTolerance,
) -> Result<Vec<GammaVerdict>> {
    let e0 = decay_threshold(&params.bounds);
    if params.bounds.e >= e0 {
        return Err(Error::hypothesis(format!(
            "decay constant E = {} is not below E0 = {e0}",
            params.bounds.e
        )));
    }
    let n = u.dim();
    if u.support.lo[n - 1] < 1.0 {
        return Err(Error::argument(format!(
            "support must lie in x_n >= 1 (starts at {})",
            u.support.lo[n - 1]
        )));
    }
    check_common(u, field, params, integration, Variant::Prop14)?;
    run(u, field, params, integration, gammas, tol)
}

/// Dispatches on `params.variant`.
pub fn check_inequality(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
    gammas: &[f64],
    tol: CarlemanTolerance,
) -> Result<Vec<GammaVerdict>> {
    match params.variant {
        Variant::Prop13 => check_inequality_12(u, field, params, integration, gammas, tol),
        Variant::Prop14 => check_inequality_13(u, field, params, integration, gammas, tol),
    }
}

/// Largest relative change of `LHS/RHS` between `integration` and its
/// refinement.
pub fn refinement_drift(
    u: &TestFunction,
    field: &dyn CoefficientField,
    params: &WeightParams,
    integration: &Integration,
    gammas: &[f64],
) -> Result<f64> {
    let tol = CarlemanTolerance::default();
    let coarse = check_inequality(u, field, params, integration, gammas, tol)?;
    let fine = check_inequality(u, field, params, &integration.refine(), gammas, tol)?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| if c.ratio == f.ratio { 0.0 } else { (f.ratio - c.ratio).abs() / c.ratio.abs().max(f.ratio.abs()) })
        .fold(0.0, f64::max))
}

/// Family run over seeded bumps in `support` with pairwise integration: one
/// margin per `(seed, γ)`, located at `(seed, γ)`, plus the largest refinement drift (margin
/// `max_drift − drift`) and the scaling check (verdicts for `cu`,
/// `c ∈ {10⁻², 10²}`, equal to those for `u`).
#[derive(Debug, Clone, Serialize)]
pub struct FamilyOutcome {
    pub verdicts: Vec<(u64, GammaVerdict)>,
    pub report: MarginReport,
}

#[allow(clippy::too_many_arguments)]
pub fn check_family(
    field: &dyn CoefficientField,
    params: &WeightParams,
    support: &BoxDomain,
    seeds: &[u64],
    gammas: &[f64],
    nodes: usize,
    max_drift: f64,
    tol: CarlemanTolerance,
) -> Result<FamilyOutcome> {
    let mut verdicts = Vec::new();
    let mut points = Vec::new();
    let mut drift_points = Vec::new();
    let mut scale_points = Vec::new();
    for &seed in seeds {
        let u = make_bump(support.clone(), Some(seed))?;
        let integration = Integration::Pairwise { nodes };
        let vs = check_inequality(&u, field, params, &integration, gammas, tol)?;
        for v in &vs {
            points.push(MarginPoint {
                location: vec![seed as f64, v.gamma],
                margin: v.margin,
            });
            verdicts.push((seed, *v));
        }
        for c in [1e-2, 1e2] {
            let scaled = check_inequality(&u.scaled(c), field, params, &integration, gammas, tol)?;
            let same = scaled.iter().zip(&vs).all(|(a, b)| a.pass == b.pass);
            scale_points.push(MarginPoint {
                location: vec![seed as f64, c],
                margin: if same { 0.0 } else { -1.0 },
            });
        }
        let drift = refinement_drift(&u, field, params, &integration, gammas)?;
        drift_points.push(MarginPoint {
            location: vec![seed as f64],
            margin: max_drift - drift,
        });
    }
    let report = MarginReport::combine(
        "carleman",
        vec![
            MarginReport::from_points("inequality", points, 0.0),
            MarginReport::from_points("scaling_invariance", scale_points, 0.0),
            MarginReport::from_points("refinement_drift", drift_points, 0.0),
        ],
    );
    Ok(FamilyOutcome { verdicts, report })
}

/// Lowest time `t` at which `2γ(t^{−K} − 1)·g_max` stays within `budget`
/// nats, i.e. where the time factor of the weight varies by at most
/// `e^{budget}` over `[t, 1]`. `g_max` bounds `xₙ^α` on the support (1 for
/// the whole-space weight).
pub fn usable_t_floor(k: f64, gamma: f64, g_max: f64, budget: f64) -> f64 {
    (1.0 + budget / (2.0 * gamma * g_max)).powf(-1.0 / k)
}
