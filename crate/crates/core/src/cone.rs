//! Cone-to-half-space construction in the plane.
//!
//! The map `(r, θ) ↦ (r, lθ)` with `l = π/θ₀` sends the cone of opening `θ₀`
//! onto the upper half-plane and turns the Laplacian into `∇·(A∇)` with
//! `A(y) = I + (l²−1) w wᵀ/|y|²`, `w = (y₂, −y₁)`. Shifting by `e₂` gives a
//! field `B(y) = A(y₁, y₂+1)` on the half-plane with `|∇b^{ij}| ≤ (l²−1)/r`.

use crate::calculus::SmoothFunction;
use crate::error::{Error, Result};
use crate::fields::{CoeffEval, CoefficientField, DomainTag, EllipticityBounds};
use crate::linalg::{self, Mat};
use crate::report::{MarginPoint, MarginReport};
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConeParams {
    pub theta0: f64,
    pub l: f64,
}

impl ConeParams {
    pub fn from_l(l: f64) -> Result<Self> {
        if !(l >= 1.0 && l.is_finite()) {
            return Err(Error::argument(format!("cone stretch factor must be >= 1 (got {l})")));
        }
        Ok(ConeParams { theta0: PI / l, l })
    }

    pub fn from_theta0(theta0: f64) -> Result<Self> {
        if !(theta0 > 0.0 && theta0 <= PI) {
            return Err(Error::argument("opening angle must lie in (0, π]"));
        }
        Ok(ConeParams { theta0, l: PI / theta0 })
    }

    /// Parameters whose decay constant `l² − 1` equals `E1`.
    pub fn from_decay(e1: f64) -> Result<Self> {
        if !(e1 >= 0.0) {
            return Err(Error::argument("decay constant must be nonnegative"));
        }
        Self::from_l((1.0 + e1).sqrt())
    }

    /// `l² − 1`, the decay constant of the shifted field.
    pub fn decay(&self) -> f64 {
        self.l * self.l - 1.0
    }
}

/// `A(y) = I + (l²−1) w wᵀ/r²` with `w = (y₂, −y₁)`.
pub fn cone_matrix(y: &[f64], params: &ConeParams) -> Result<Mat> {
    let r2 = y[0] * y[0] + y[1] * y[1];
    if !(r2 > 0.0) {
        return Err(Error::domain("cone matrix is singular at the vertex"));
    }
    let s = params.decay();
    let w = [y[1], -y[0]];
    let mut a = Mat::identity(2, 2);
    for i in 0..2 {
        for j in 0..2 {
            a[(i, j)] += s * w[i] * w[j] / r2;
        }
    }
    Ok(a)
}

/// The same matrix written entry by entry, as read off the transformed
/// Laplacian.
pub fn cone_matrix_entries(y: &[f64], params: &ConeParams) -> Mat {
    let r2 = y[0] * y[0] + y[1] * y[1];
    let s = params.decay();
    Mat::from_row_slice(
        2,
        2,
        &[
            1.0 + s * y[1] * y[1] / r2,
            -s * y[0] * y[1] / r2,
            -s * y[0] * y[1] / r2,
            1.0 + s * y[0] * y[0] / r2,
        ],
    )
}

/// `∂ₖA(y)` for `k = 1, 2`.
pub fn cone_matrix_gradient(y: &[f64], params: &ConeParams) -> [Mat; 2] {
    let r2 = y[0] * y[0] + y[1] * y[1];
    let s = params.decay();
    let w = [y[1], -y[0]];
    let dw = [[0.0, -1.0], [1.0, 0.0]];
    let mut out = [Mat::zeros(2, 2), Mat::zeros(2, 2)];
    for (k, g) in out.iter_mut().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                g[(i, j)] = s
                    * ((dw[k][i] * w[j] + w[i] * dw[k][j]) / r2
                        - 2.0 * y[k] * w[i] * w[j] / (r2 * r2));
            }
        }
    }
    out
}

/// The shifted field `B(y) = A(y₁, y₂+1)` on `{y₂ > 0}`.
#[derive(Debug, Clone)]
pub struct ConeField {
    pub params: ConeParams,
    bounds: EllipticityBounds,
}

/// Builds the shifted field with bounds `λ = 1`, `Λ = l²`, `M = E = l²−1`.
pub fn shifted_field(params: ConeParams) -> ConeField {
    let s = params.decay();
    ConeField {
        params,
        bounds: EllipticityBounds {
            n: 2,
            lambda: 1.0,
            big_lambda: params.l * params.l,
            m: s,
            e: s,
        },
    }
}

/// Shifted field whose declared decay `E = l² − 1` is the given fraction of
/// the half-space threshold `E₀ = 1/(64κ(κ+1))`, `κ = l²`. Solves
/// `64(u − 1)u(u + 1) = fraction` for `u = l²` by bisection.
pub fn threshold_fraction_field(fraction: f64) -> Result<ConeField> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::argument(format!("threshold fraction must lie in (0, 1) (got {fraction})")));
    }
    let g = |u: f64| 64.0 * (u - 1.0) * u * (u + 1.0) - fraction;
    let (mut lo, mut hi) = (1.0, 2.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(shifted_field(ConeParams::from_l((0.5 * (lo + hi)).sqrt())?))
}

impl ConeField {
    pub fn with_bounds(mut self, bounds: EllipticityBounds) -> Self {
        self.bounds = bounds;
        self
    }
}

impl CoefficientField for ConeField {
    fn name(&self) -> String {
        format!("cone(l={})", self.params.l)
    }
    fn bounds(&self) -> EllipticityBounds {
        self.bounds
    }
    fn domain(&self) -> DomainTag {
        DomainTag::ShiftedHalfSpace
    }
    fn eval_unchecked(&self, x: &[f64], _t: f64) -> CoeffEval {
        let y = [x[0], x[1] + 1.0];
        let a = cone_matrix(&y, &self.params).expect("shifted point is away from the vertex");
        let [g0, g1] = cone_matrix_gradient(&y, &self.params);
        CoeffEval {
            a,
            grad: vec![g0, g1],
            dt: Mat::zeros(2, 2),
        }
    }
    fn is_constant(&self) -> bool {
        self.params.l == 1.0
    }
}

/// Margins of `|∇b^{ij}| ≤ E₁` and `|∇b^{ij}| ≤ E₁/r` at each sample, with
/// `r` read both as the shifted radius `|(y₁, y₂+1)|` and as `|y|`.
pub fn gradient_bound_check(
    params: &ConeParams,
    samples: &[Vec<f64>],
    claimed_e1: Option<f64>,
    tol: f64,
) -> Result<MarginReport> {
    if samples.is_empty() {
        return Err(Error::argument("empty sample cloud"));
    }
    let e1 = claimed_e1.unwrap_or_else(|| params.decay());
    let field = shifted_field(*params);
    let mut uniform = Vec::new();
    let mut shifted = Vec::new();
    let mut plain = Vec::new();
    for y in samples {
        if !(y[1] > 0.0) {
            return Err(Error::domain(format!("sample {y:?} is not in the upper half-plane")));
        }
        let ev = field.eval_unchecked(y, 0.0);
        let g = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| ev.grad_norm(i, j))
            .fold(0.0_f64, f64::max);
        let rt = (y[0] * y[0] + (y[1] + 1.0).powi(2)).sqrt();
        let r = linalg::norm(y);
        uniform.push(MarginPoint { location: y.clone(), margin: e1 - g });
        shifted.push(MarginPoint { location: y.clone(), margin: e1 / rt - g });
        plain.push(MarginPoint { location: y.clone(), margin: e1 / r - g });
    }
    Ok(MarginReport::combine(
        "cone_gradient_bound",
        vec![
            MarginReport::from_points("uniform", uniform, tol),
            MarginReport::from_points("decay_shifted_radius", shifted, tol),
            MarginReport::from_points("decay_plain_radius", plain, tol),
        ],
    ))
}

/// Deviation of the spectrum of `A(y)` from `{1, l²}` at each sample
/// (margin `−max|μₖ − expectedₖ|`).
pub fn spectrum_check(params: &ConeParams, samples: &[Vec<f64>], tol: f64) -> Result<MarginReport> {
    if samples.is_empty() {
        return Err(Error::argument("empty sample cloud"));
    }
    let expect = [1.0, params.l * params.l];
    let mut pts = Vec::with_capacity(samples.len());
    for y in samples {
        let ev = linalg::sym_eigenvalues(&cone_matrix(y, params)?);
        let err = ev.iter().zip(expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pts.push(MarginPoint { location: y.clone(), margin: -err });
    }
    Ok(MarginReport::from_points("cone_spectrum", pts, tol))
}

/// Points `r(cos θ, sin θ)` with `r ∈ [r_min, r_max]`, `θ ∈ [0.1, π − 0.1]`.
pub fn half_plane_samples(count: usize, r_min: f64, r_max: f64, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut g = crate::calculus::rng(seed);
    (0..count)
        .map(|_| {
            let r = g.gen_range(r_min..r_max);
            let th = g.gen_range(0.1..(PI - 0.1));
            vec![r * th.cos(), r * th.sin()]
        })
        .collect()
}

/// Point of the cone corresponding to `y` in the upper half-plane.
pub fn cone_point(y: &[f64], params: &ConeParams) -> Vec<f64> {
    let r = linalg::norm(y);
    let th = y[1].atan2(y[0]) / params.l;
    vec![r * th.cos(), r * th.sin()]
}

/// Half-plane point corresponding to `x` in the cone.
pub fn half_plane_point(x: &[f64], params: &ConeParams) -> Vec<f64> {
    let r = linalg::norm(x);
    let th = x[1].atan2(x[0]) * params.l;
    vec![r * th.cos(), r * th.sin()]
}

/// `∇·(A∇φ)(y) = ∂ᵢa^{ij}∂ⱼφ + a^{ij}∂ᵢⱼφ` in closed form.
pub fn transformed_operator(phi: &dyn SmoothFunction, y: &[f64], params: &ConeParams) -> Result<f64> {
    let a = cone_matrix(y, params)?;
    let g = cone_matrix_gradient(y, params);
    let j = phi.jet(y, 0.0);
    let mut v = 0.0;
    for i in 0..2 {
        for k in 0..2 {
            v += g[i][(i, k)] * j.grad[k] + a[(i, k)] * j.hess[(i, k)];
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorResidual {
    /// `max |Δₓu_h − ∇·(A∇φ)| / max |∇·(A∇φ)|` over the samples.
    pub max_residual: f64,
    pub step_scale: f64,
    pub report: MarginReport,
}

/// Compares a five-point finite-difference Laplacian of `u = φ∘y` in cone
/// coordinates with `∇·(A∇φ)` at each half-plane sample. The step is
/// `step_scale · min(10⁻³, r/100)`.
pub fn operator_equivalence_residual(
    phi: &dyn SmoothFunction,
    params: &ConeParams,
    samples: &[Vec<f64>],
    r_min: f64,
    step_scale: f64,
) -> Result<OperatorResidual> {
    if samples.is_empty() {
        return Err(Error::argument("empty sample cloud"));
    }
    let u = |x: &[f64]| phi.jet(&half_plane_point(x, params), 0.0).value;
    let mut exact = Vec::with_capacity(samples.len());
    let mut approx = Vec::with_capacity(samples.len());
    for y in samples {
        let r = linalg::norm(y);
        if r < r_min {
            return Err(Error::domain(format!("sample {y:?} is within {r_min} of the cone vertex")));
        }
        if !(y[1] > 0.0) {
            return Err(Error::domain(format!("sample {y:?} is not in the upper half-plane")));
        }
        let x = cone_point(y, params);
        let h = step_scale * (1e-3_f64).min(r / 100.0);
        let c = u(&x);
        let lap = (u(&[x[0] + h, x[1]]) + u(&[x[0] - h, x[1]]) + u(&[x[0], x[1] + h]) + u(&[x[0], x[1] - h])
            - 4.0 * c)
            / (h * h);
        exact.push(transformed_operator(phi, y, params)?);
        approx.push(lap);
    }
    let scale = exact.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let points: Vec<MarginPoint> = samples
        .iter()
        .zip(exact.iter().zip(&approx))
        .map(|(y, (e, a))| MarginPoint {
            location: y.clone(),
            margin: -(e - a).abs() / scale.max(f64::MIN_POSITIVE),
        })
        .collect();
    let max_residual = if scale == 0.0 {
        approx.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    } else {
        points.iter().fold(0.0_f64, |a, p| a.max(-p.margin))
    };
    Ok(OperatorResidual {
        max_residual,
        step_scale,
        report: MarginReport::from_points("operator_equivalence", points, f64::INFINITY),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BuRegime {
    BuHolds,
    BuFails,
    Indeterminate,
}

/// `2·arccos(1/√3)` in radians.
pub fn critical_angle() -> f64 {
    2.0 * (1.0 / 3f64.sqrt()).acos()
}

/// `(π/(2·arccos(1/√3)))² − 1`.
pub fn lower_threshold() -> f64 {
    (PI / critical_angle()).powi(2) - 1.0
}

pub fn threshold_classify(e1: f64) -> Result<BuRegime> {
    if !(e1 >= 0.0) {
        return Err(Error::argument("decay constant must be nonnegative"));
    }
    Ok(if e1 < lower_threshold() {
        BuRegime::BuHolds
    } else if e1 > 3.0 {
        BuRegime::BuFails
    } else {
        BuRegime::Indeterminate
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{convergence_order_halving, rng, Gaussian};
    use crate::fields::{eval_coefficients, gradient_fd_error};
    use proptest::prelude::*;
    use rand::Rng;

    fn p(l: f64) -> ConeParams {
        ConeParams::from_l(l).unwrap()
    }

    #[test]
    fn axis_points_diagonalize() {
        let a = cone_matrix(&[1.0, 0.0], &p(2.0)).unwrap();
        assert_eq!(a, Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
        let a = cone_matrix(&[0.0, 1.0], &p(2.0)).unwrap();
        assert_eq!(a, Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn vertex_is_a_domain_error() {
        assert!(matches!(cone_matrix(&[0.0, 0.0], &p(2.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn shifted_field_examples() {
        let f = shifted_field(p(2.0));
        let ev = eval_coefficients(&f, &[0.0, 0.0], 0.0);
        assert!(ev.is_err(), "y₂ = 0 lies on the boundary");
        let a = f.eval_unchecked(&[0.0, 0.0], 0.0).a;
        assert_eq!(a, Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]));
        let f1 = shifted_field(p(1.0));
        let ev = f1.eval_unchecked(&[0.3, 2.0], 0.0);
        assert_eq!(ev.a, Mat::identity(2, 2));
        assert!(ev.grad.iter().all(|g| linalg::max_abs(g) == 0.0));
        let b = f.bounds();
        assert_eq!((b.lambda, b.big_lambda, b.e), (1.0, 4.0, 3.0));
    }

    #[test]
    fn inflated_claim_fails() {
        let mut g = rng(4);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![g.gen_range(-1.0..1.0), g.gen_range(0.01..1.0)])
            .collect();
        let ok = gradient_bound_check(&p(2.0), &samples, None, 1e-12).unwrap();
        assert!(ok.pass);
        let bad = gradient_bound_check(&p(2.0), &samples, Some(1.0), 1e-12).unwrap();
        assert!(!bad.pass);
        let flat = gradient_bound_check(&p(1.0), &samples, None, 0.0).unwrap();
        assert_eq!(flat.min_margin, 0.0);
    }

    #[test]
    fn spectrum_is_one_and_l_squared() {
        for l in [1.5, 2.0] {
            let r = spectrum_check(&p(l), &half_plane_samples(500, 0.1, 5.0, 3), 1e-10).unwrap();
            assert!(r.pass && r.min_margin > -1e-12, "{r:?}");
        }
        assert!(spectrum_check(&p(2.0), &[vec![0.0, 0.0]], 1e-10).is_err());
    }

    #[test]
    fn thresholds() {
        assert!((lower_threshold() - 1.7037).abs() < 1e-3);
        assert!((critical_angle().to_degrees() - 109.47).abs() < 0.01);
        assert_eq!(threshold_classify(1.0).unwrap(), BuRegime::BuHolds);
        assert_eq!(threshold_classify(4.0).unwrap(), BuRegime::BuFails);
        assert_eq!(threshold_classify(2.0).unwrap(), BuRegime::Indeterminate);
        assert!(threshold_classify(-1.0).is_err());
    }

    #[test]
    fn identity_map_residual_is_truncation_only() {
        let phi = Gaussian { center: vec![0.5, 1.0], width: 0.7, amplitude: 1.0 };
        let samples: Vec<Vec<f64>> = (0..50).map(|k| vec![-1.0 + 0.04 * k as f64, 0.3 + 0.03 * k as f64]).collect();
        let r = operator_equivalence_residual(&phi, &p(1.0), &samples, 0.1, 1.0).unwrap();
        assert!(r.max_residual <= 1e-6, "{}", r.max_residual);
    }

    #[test]
    fn zero_function_has_zero_residual() {
        let phi = Gaussian { center: vec![0.5, 1.0], width: 0.7, amplitude: 0.0 };
        let r = operator_equivalence_residual(&phi, &p(2.0), &[vec![0.3, 0.8]], 0.1, 1.0).unwrap();
        assert_eq!(r.max_residual, 0.0);
    }

    #[test]
    fn residual_is_second_order() {
        let phi = Gaussian { center: vec![0.2, 1.0], width: 0.6, amplitude: 1.0 };
        let mut g = rng(9);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let r = g.gen_range(0.3..2.0);
                let th = g.gen_range(0.1..(PI - 0.1));
                vec![r * th.cos(), r * th.sin()]
            })
            .collect();
        let res: Vec<f64> = [40.0, 20.0, 10.0]
            .iter()
            .map(|s| operator_equivalence_residual(&phi, &p(2.0), &samples, 0.1, *s).unwrap().max_residual)
            .collect();
        let o = convergence_order_halving(&res).unwrap();
        assert!(o >= 1.8, "order {o} from {res:?}");
    }

    #[test]
    fn near_vertex_rejected() {
        let phi = Gaussian { center: vec![0.0, 1.0], width: 1.0, amplitude: 1.0 };
        assert!(operator_equivalence_residual(&phi, &p(2.0), &[vec![0.01, 0.01]], 0.1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn entry_formula_identity(r in 0.05..20.0f64, th in 0.0..PI, l in 1.0..3.0f64) {
            let y = [r * th.cos(), r * th.sin()];
            let a = cone_matrix(&y, &p(l)).unwrap();
            prop_assert!(linalg::max_abs(&(a - cone_matrix_entries(&y, &p(l)))) <= 1e-14 * l * l);
        }

        #[test]
        fn spectrum_and_determinant(th in 0.0..(2.0 * PI), l in 1.0..3.0f64) {
            let y = [th.cos(), th.sin()];
            let a = cone_matrix(&y, &p(l)).unwrap();
            let ev = linalg::sym_eigenvalues(&a);
            prop_assert!((ev[0] - 1.0).abs() <= 1e-10 && (ev[1] - l * l).abs() <= 1e-10);
            prop_assert!((a.determinant() - l * l).abs() <= 1e-10);
        }

        #[test]
        fn shifted_gradient_matches_fd(y0 in -5.0..5.0f64, y1 in 0.05..5.0f64) {
            let f = shifted_field(p(2.0));
            prop_assert!(gradient_fd_error(&f, &[y0, y1], 0.0, 1e-4) < 1e-6);
        }

        #[test]
        fn maps_are_inverse(r in 0.1..5.0f64, th in 0.05..(PI - 0.05)) {
            let y = vec![r * th.cos(), r * th.sin()];
            let back = half_plane_point(&cone_point(&y, &p(2.0)), &p(2.0));
            prop_assert!((back[0] - y[0]).abs() < 1e-12 && (back[1] - y[1]).abs() < 1e-12);
        }
    }
}
