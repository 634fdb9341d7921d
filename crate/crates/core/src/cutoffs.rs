//! Space-time cutoff `η(y, s) = η₁(yₙ)η₂(f(s)yₙ^α/(2C⋆) − 1)` used to pass
//! from the half-space inequality to backward uniqueness, with
//! `C⋆ = 1 + f(1/2)(1/τ + 2)^α`.
//!
//! Both transitions use the smooth step `B(s) = e(s)/(e(s) + e(1−s))`,
//! `e(s) = exp(−1/s)` for `s > 0` and `0` otherwise.

use crate::calculus::{rng, sample_box};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::report::{empirical_sup_report, MarginPoint, MarginReport};
use crate::weights::{f_derivatives, f_value, DefaultConstants};
use rand::Rng;
use serde::Serialize;

/// Width near the ends of a step argument where `exp(−1/z) < 10⁻⁸`.
pub const SATURATION_BAND: f64 = 0.05;

/// `(B, B′, B″)` of the smooth unit step.
pub fn smooth_step(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let e = |z: f64| (-1.0 / z).exp();
    let e1 = |z: f64| e(z) / (z * z);
    let e2 = |z: f64| e(z) * (1.0 - 2.0 * z) / z.powi(4);
    let (u, u1, u2) = (e(s), e1(s), e2(s));
    let r = 1.0 - s;
    let (v, v1, v2) = (e(r), -e1(r), e2(r));
    let d = u + v;
    let num = u1 * v - u * v1;
    let num1 = u2 * v - u * v2;
    (u / d, num / (d * d), (num1 * d - 2.0 * num * (u1 + v1)) / (d * d * d))
}

/// Step rising from 0 at `a` to 1 at `b`, with derivatives.
pub fn transition(p: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let w = b - a;
    let (v, d1, d2) = smooth_step((p - a) / w);
    (v, d1 / w, d2 / (w * w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CutoffSpec {
    pub tau: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub alpha: f64,
    #[serde(rename = "Cstar")]
    pub c_star: f64,
}

/// `C⋆ = 1 + f(1/2)(1/τ + 2)^α`.
pub fn c_star(tau: f64, k: f64, alpha: f64) -> f64 {
    1.0 + f_value(0.5, k) * (1.0 / tau + 2.0).powf(alpha)
}

impl CutoffSpec {
    pub fn new(tau: f64, k: f64, alpha: f64) -> Result<Self> {
        if !(tau > 0.0) || !(k > 0.0) {
            return Err(Error::argument("tau and K must be positive"));
        }
        if !(1.0..2.0).contains(&alpha) {
            return Err(Error::argument(format!("alpha must lie in [1, 2) (got {alpha})")));
        }
        Ok(CutoffSpec {
            tau,
            k,
            alpha,
            c_star: c_star(tau, k, alpha),
        })
    }

    /// Cutoff built from half-space default constants.
    pub fn from_constants(c: &DefaultConstants) -> Result<Self> {
        Self::new(c.tau, c.params.k, c.params.alpha)
    }

    /// Same spec with `C⋆` replaced (for negative controls).
    pub fn with_c_star(self, c_star: f64) -> Self {
        CutoffSpec { c_star, ..self }
    }

    /// Lower and upper edges of the `η₁` transition.
    pub fn y_band(&self) -> (f64, f64) {
        (1.0 / self.tau + 1.0, 1.0 / self.tau + 2.0)
    }

    /// `f(s)yₙ^α / C⋆`, the ratio whose thresholds 1/2 and 1 bound the `η₂`
    /// transition.
    pub fn ratio(&self, yn: f64, s: f64) -> f64 {
        f_value(s, self.k) * yn.powf(self.alpha) / self.c_star
    }
}

/// Value and derivatives of the cutoff; `grad` and `hess` are spatial.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaEval {
    pub value: f64,
    pub ds: f64,
    pub grad: Vec<f64>,
    pub hess: Mat,
}

impl EtaEval {
    /// `|∂ₛη| + |∇η| + |∇²η|` (Euclidean and Frobenius norms).
    pub fn derivative_size(&self) -> f64 {
        self.ds.abs() + crate::linalg::norm(&self.grad) + self.hess.norm()
    }
}

/// `η(y, s)` with derivatives, for `s ∈ (0, 1)`.
pub fn eta(y: &[f64], s: f64, spec: &CutoffSpec) -> EtaEval {
    let n = y.len();
    let yn = y[n - 1];
    let (a1, b1) = spec.y_band();
    let (e1, e1p, e1pp) = transition(yn, a1, b1);
    let (f, fp, _) = f_derivatives(s, spec.k);
    let al = spec.alpha;
    let two_c = 2.0 * spec.c_star;
    let q = f * yn.powf(al) / two_c - 1.0;
    let q_s = fp * yn.powf(al) / two_c;
    let q_n = f * al * yn.powf(al - 1.0) / two_c;
    let q_nn = f * al * (al - 1.0) * yn.powf(al - 2.0) / two_c;
    let (e2, e2p, e2pp) = transition(q, -0.75, -0.5);
    let mut grad = vec![0.0; n];
    let mut hess = Mat::zeros(n, n);
    grad[n - 1] = e1p * e2 + e1 * e2p * q_n;
    hess[(n - 1, n - 1)] = e1pp * e2 + 2.0 * e1p * e2p * q_n + e1 * (e2pp * q_n * q_n + e2p * q_nn);
    EtaEval {
        value: e1 * e2,
        ds: e1 * e2p * q_s,
        grad,
        hess,
    }
}

/// Samples `(y, s)` with `s ∈ (1/2, 1)` and `yₙ` in the `η₁` band, plus the
/// corner `(s, yₙ) = (1/2, 1/τ + 2)` where the supremum defining `C⋆` is
/// approached. Tangential coordinates lie in `[−1, 1]`.
pub fn band_samples(spec: &CutoffSpec, n: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let (a, b) = spec.y_band();
    let mut g = rng(seed);
    let mut lo = vec![-1.0; n];
    let mut hi = vec![1.0; n];
    lo[n - 1] = a;
    hi[n - 1] = b;
    let mut out: Vec<(Vec<f64>, f64)> = (0..count.saturating_sub(1))
        .map(|_| (sample_box(&mut g, &lo, &hi), g.gen_range(0.5..1.0)))
        .collect();
    let mut corner = vec![0.0; n];
    corner[n - 1] = b;
    out.push((corner, 0.5));
    out
}

/// Samples with `s ∈ (1/2, 1)` and `yₙ` spread over `(1/τ, 1/τ + span)`,
/// covering both transitions.
pub fn transition_samples(spec: &CutoffSpec, n: usize, count: usize, span: f64, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut g = rng(seed);
    let mut lo = vec![-1.0; n];
    let mut hi = vec![1.0; n];
    lo[n - 1] = 1.0 / spec.tau;
    hi[n - 1] = 1.0 / spec.tau + span;
    (0..count)
        .map(|_| (sample_box(&mut g, &lo, &hi), g.gen_range(0.5..1.0)))
        .collect()
}

fn loc(y: &[f64], s: f64) -> Vec<f64> {
    let mut v = y.to_vec();
    v.push(s);
    v
}

/// Emptiness of `{1/2 < s < 1, 0 < η₁ < 1, f(s)yₙ^α ≥ C⋆}` and the resulting
/// description of `{0 < η < 1, s > 1/2}`.
///
/// Component `c_star_excess` has margin `C⋆ − f(s)yₙ^α` on `band` samples,
/// evaluated as `(C⋆ − 1 − f(1/2)(1/τ+2)^α) + 1 + (f(1/2) − f(s))(1/τ+2)^α +
/// f(s)((1/τ+2)^α − yₙ^α)`, a sum of terms that are exact or nonnegative
/// in floating point. Component `transition_set` compares membership of each
/// `wide` sample in `{0 < η < 1}` with `{yₙ > 1/τ+1, 1/2 < f(s)yₙ^α/C⋆ < 1}`
/// (margin 0 on agreement, −1 otherwise). Samples whose normalized step
/// argument lies within `SATURATION_BAND` of 0 or 1 are skipped: there
/// `exp(−1/z)` is below machine epsilon and the step rounds to 0 or 1.
pub fn verify_omega_identity(
    spec: &CutoffSpec,
    band: &[(Vec<f64>, f64)],
    wide: &[(Vec<f64>, f64)],
    tol: f64,
) -> MarginReport {
    let top = 1.0 / spec.tau + 2.0;
    let top_a = top.powf(spec.alpha);
    let f_half = f_value(0.5, spec.k);
    let offset = spec.c_star - (1.0 + f_half * top_a);
    let excess: Vec<MarginPoint> = band
        .iter()
        .map(|(y, s)| {
            let yn = y[y.len() - 1];
            let f = f_value(*s, spec.k);
            let m = offset + 1.0 + (f_half - f).max(0.0) * top_a + f * (top_a - yn.powf(spec.alpha)).max(0.0);
            MarginPoint {
                location: loc(y, *s),
                margin: m,
            }
        })
        .collect();
    let (a1, b1) = spec.y_band();
    let mut agree = Vec::new();
    for (y, s) in wide {
        let yn = y[y.len() - 1];
        let r = spec.ratio(yn, *s);
        let z1 = (yn - a1) / (b1 - a1);
        let z2 = 2.0 * r - 1.0;
        let near = |z: f64| z.abs() < SATURATION_BAND || (z - 1.0).abs() < SATURATION_BAND;
        if near(z1) || near(z2) {
            continue;
        }
        let v = eta(y, *s, spec).value;
        let in_eta = v > 0.0 && v < 1.0;
        let in_desc = yn > a1 && r > 0.5 && r < 1.0;
        agree.push(MarginPoint {
            location: loc(y, *s),
            margin: if in_eta == in_desc { 0.0 } else { -1.0 },
        });
    }
    MarginReport::combine(
        "omega_identity",
        vec![
            MarginReport::from_points("c_star_excess", excess, tol),
            MarginReport::from_points("transition_set", agree, 0.0),
        ],
    )
}

/// Empirical constant of `|∂ₛη| + |∇η| + |∇²η| ≤ C yₙ^α` with the
/// refinement-stability check.
pub fn verify_cutoff_derivative_bound(spec: &CutoffSpec, samples: &[(Vec<f64>, f64)]) -> MarginReport {
    let ratios: Vec<f64> = samples
        .iter()
        .map(|(y, s)| eta(y, *s, spec).derivative_size() / y[y.len() - 1].powf(spec.alpha))
        .collect();
    empirical_sup_report("cutoff_derivative_constant", &ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::richardson_first;
    use crate::fields::EllipticityBounds;
    use crate::weights::{default_constants, Variant};
    use proptest::prelude::*;

    fn default_spec() -> (DefaultConstants, CutoffSpec) {
        let b = EllipticityBounds::new(2, 1.0, 1.0, 0.0, 0.0).unwrap();
        let c = default_constants(&b, Variant::Prop14, 2.0, 1.0, 1.0).unwrap();
        (c, CutoffSpec::from_constants(&c).unwrap())
    }

    #[test]
    fn c_star_examples() {
        let s = CutoffSpec::new(1.0, 1.0, 1.5).unwrap();
        assert!((s.c_star - (1.0 + 27f64.sqrt())).abs() < 1e-14);
        assert!((s.c_star - 6.196).abs() < 1e-3);
        let (c, s) = default_spec();
        assert_eq!(s.c_star, 1.0 + (2f64.powf(c.params.k) - 1.0) * (1.0 / c.tau + 2.0).powf(c.params.alpha));
        assert_eq!(c.t1, 1.0 / 32768.0);
        assert_eq!(1.0 / s.tau, 128.0);
    }

    #[test]
    fn eta_examples() {
        let (_, s) = default_spec();
        for t in [0.1, 0.6, 0.9] {
            assert_eq!(eta(&[0.0, 1.0 / s.tau + 0.5], t, &s).value, 0.0);
        }
        let y = [0.3, 1.0 / s.tau + 10.0];
        assert_eq!(eta(&y, 1.0 - 1e-12, &s).value, 0.0);
        assert_eq!(smooth_step(0.5).0, 0.5);
    }

    #[test]
    fn step_derivatives_match_differences() {
        for s in [0.05, 0.2, 0.5, 0.77, 0.95] {
            let (_, d1, d2) = smooth_step(s);
            assert!((richardson_first(|z| smooth_step(z).0, s, 1e-4) - d1).abs() <= 1e-7 * d1.abs().max(1.0));
            assert!((richardson_first(|z| smooth_step(z).1, s, 1e-4) - d2).abs() <= 1e-6 * d2.abs().max(1.0));
        }
    }

    #[test]
    fn eta_derivatives_match_differences() {
        let s = CutoffSpec::new(0.5, 2.0, 1.5).unwrap();
        let samples = transition_samples(&s, 2, 400, 8.0, 11);
        let mut checked = 0;
        for (y, t) in &samples {
            let e = eta(y, *t, &s);
            if e.value == 0.0 || e.value == 1.0 {
                continue;
            }
            checked += 1;
            let with_n = |v: f64| {
                let mut z = y.clone();
                z[1] = v;
                z
            };
            let fd_ds = richardson_first(|u| eta(y, u, &s).value, *t, 1e-5);
            let fd_n = richardson_first(|v| eta(&with_n(v), *t, &s).value, y[1], 1e-5);
            let fd_nn = richardson_first(|v| eta(&with_n(v), *t, &s).grad[1], y[1], 1e-5);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel(fd_ds, e.ds) <= 1e-4, "ds {fd_ds} {}", e.ds);
            assert!(rel(fd_n, e.grad[1]) <= 1e-4);
            assert!(rel(fd_nn, e.hess[(1, 1)]) <= 1e-4, "nn {fd_nn} {}", e.hess[(1, 1)]);
            assert_eq!(e.grad[0], 0.0);
        }
        assert!(checked > 50);
    }

    #[test]
    fn omega_identity_default_spec() {
        let (_, s) = default_spec();
        let band = band_samples(&s, 2, 10_000, 12);
        let wide = transition_samples(&s, 2, 2000, 20.0, 13);
        let r = verify_omega_identity(&s, &band, &wide, 0.0);
        assert!(r.pass);
        assert!(r.find("c_star_excess").unwrap().min_margin >= 1.0);
        let low = s.with_c_star(s.c_star - 2.0);
        assert!(!verify_omega_identity(&low, &band, &wide, 0.0).pass);
    }

    #[test]
    fn omega_identity_small_spec() {
        let s = CutoffSpec::new(1.0, 1.0, 1.5).unwrap();
        let band = band_samples(&s, 2, 2000, 14);
        let wide = transition_samples(&s, 2, 4000, 30.0, 15);
        let r = verify_omega_identity(&s, &band, &wide, 0.0);
        assert!(r.pass);
        assert!(r.find("transition_set").unwrap().sample_count > 1000);
        assert!(!verify_omega_identity(&s.with_c_star(s.c_star - 2.0), &band, &wide, 0.0).pass);
        let flat = CutoffSpec::new(1.0, 1e-12, 1.0).unwrap();
        let r = verify_omega_identity(&flat, &band, &[], 0.0);
        assert!((r.find("c_star_excess").unwrap().min_margin - 1.0).abs() < 1e-9);
    }

    #[test]
    fn derivative_constant_is_stable() {
        let s = CutoffSpec::new(0.5, 2.0, 1.5).unwrap();
        let r = verify_cutoff_derivative_bound(&s, &transition_samples(&s, 2, 8000, 8.0, 16));
        assert!(r.pass);
        assert!(r.empirical_constant.unwrap() > 0.0);
        let inside = vec![(vec![0.0, 1.0 / s.tau + 0.5], 0.7)];
        assert_eq!(verify_cutoff_derivative_bound(&s, &inside).empirical_constant, Some(0.0));
    }

    proptest! {
        #[test]
        fn eta_is_a_cutoff(yn in 1.0..40.0f64, t in 0.01..0.999f64) {
            let s = CutoffSpec::new(0.5, 2.0, 1.5).unwrap();
            let e = eta(&[0.0, yn], t, &s).value;
            prop_assert!((0.0..=1.0).contains(&e));
            let r = s.ratio(yn, t);
            if yn >= 1.0 / s.tau + 2.0 && r >= 1.0 {
                prop_assert_eq!(e, 1.0);
            }
        }

        #[test]
        fn transition_thresholds_agree(r in 0.0..2.0f64) {
            let q = r / 2.0 - 1.0;
            prop_assert_eq!(q > -0.75 && q < -0.5, r > 0.5 && r < 1.0);
        }
    }
}
