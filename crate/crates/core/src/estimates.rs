//! Pointwise estimates behind the two Carleman inequalities: the matrices
//! `D_G`, `B`, `B̃`, the multiplier `M₂` and its six-term split, the `ψ`
//! properties, and calibration of the free constant `d`.
//!
//! Margins that can overflow are evaluated in normalized form: the quantity
//! is multiplied by the power of `t` that makes it `O(1)` at fixed `σ` and
//! divided by `max(1, σ)^deg`. Both factors are positive, so signs survive.

use crate::calculus::{par_map, rng, sample_box, sample_log};
use crate::error::{Error, Result};
use crate::fields::{eval_coefficients, CoeffEval, CoefficientField};
use crate::linalg::{self, Mat};
use crate::mollify::{mollify_field, MollifiedEval, Mollifier};
use crate::report::{empirical_sup_report, MarginPoint, MarginReport};
use crate::sigma::SigmaPoly;
use crate::weights::{
    decay_threshold, psi_eval, psi_value, weight_eval_unsmoothed, weight_eval_with, Variant, WeightEval, WeightParams,
    ALPHA_FLOOR,
};
use serde::Serialize;
use std::ops::{Add, Mul, Sub};

type SP = SigmaPoly;

/// A space-time sample `(x, t)`.
pub type Sample = (Vec<f64>, f64);

/// Smallest time at which pointwise checks are evaluated.
pub const T_FLOOR: f64 = 1e-3;

/// Default margin tolerance for normalized margins.
pub const DEFAULT_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Matrices with σ-polynomial entries
// ---------------------------------------------------------------------------

/// Symmetric-by-construction `n × n` matrix of σ-polynomials (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMat {
    pub n: usize,
    pub e: Vec<SP>,
}

impl SigmaMat {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> SP) -> Self {
        let mut e = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                e.push(f(i, j));
            }
        }
        SigmaMat { n, e }
    }

    pub fn zeros(n: usize) -> Self {
        SigmaMat { n, e: vec![SP::ZERO; n * n] }
    }

    pub fn scaled_identity(n: usize, s: SP) -> Self {
        Self::from_fn(n, |i, j| if i == j { s } else { SP::ZERO })
    }

    /// `s·M` for a plain matrix `M`.
    pub fn scaled_plain(m: &Mat, s: SP) -> Self {
        Self::from_fn(m.nrows(), |i, j| s * m[(i, j)])
    }

    pub fn at(&self, i: usize, j: usize) -> SP {
        self.e[i * self.n + j]
    }

    pub fn degree(&self) -> usize {
        self.e.iter().map(|p| p.degree()).max().unwrap_or(0)
    }

    pub fn eval(&self, ln_sigma: f64) -> Mat {
        Mat::from_fn(self.n, self.n, |i, j| self.at(i, j).eval(ln_sigma))
    }

    /// Entries divided by `max(1, σ)^deg`.
    pub fn eval_normalized(&self, ln_sigma: f64, deg: usize) -> Mat {
        Mat::from_fn(self.n, self.n, |i, j| self.at(i, j).eval_normalized(ln_sigma, deg))
    }

    /// Matrix of the `σ^k` coefficients.
    pub fn coefficient(&self, k: usize) -> Mat {
        Mat::from_fn(self.n, self.n, |i, j| self.at(i, j).c[k])
    }

    pub fn apply(&self, v: &[SP]) -> Vec<SP> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.at(i, j) * v[j]).sum()).collect()
    }

    /// Smallest eigenvalue of `t^p · M / max(1, σ)^deg` with `deg` the
    /// matrix degree; same sign as `λ_min(M)`.
    pub fn normalized_min_eigenvalue(&self, ln_sigma: f64, t_scale: f64) -> f64 {
        let m = self.eval_normalized(ln_sigma, self.degree());
        linalg::min_eigenvalue(&linalg::symmetrize(&m)) * t_scale
    }
}

impl Add for SigmaMat {
    type Output = SigmaMat;
    fn add(mut self, o: SigmaMat) -> SigmaMat {
        for (a, b) in self.e.iter_mut().zip(o.e) {
            *a += b;
        }
        self
    }
}

impl Sub for SigmaMat {
    type Output = SigmaMat;
    fn sub(mut self, o: SigmaMat) -> SigmaMat {
        for (a, b) in self.e.iter_mut().zip(o.e) {
            *a -= b;
        }
        self
    }
}

impl Mul<f64> for SigmaMat {
    type Output = SigmaMat;
    fn mul(mut self, s: f64) -> SigmaMat {
        for a in self.e.iter_mut() {
            *a = *a * s;
        }
        self
    }
}

fn dot_sp(u: &[SP], v: &[SP]) -> SP {
    u.iter().zip(v).map(|(a, b)| *a * *b).sum()
}

/// `|v|` of a σ-polynomial vector, evaluated after dividing by `max(1,σ)^deg`.
fn normalized_norm(v: &[SP], ln_sigma: f64, deg: usize) -> f64 {
    v.iter()
        .map(|p| p.eval_normalized(ln_sigma, deg).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Normalized value of `t^p · poly` at its own degree.
fn normalized(poly: &SP, ln_sigma: f64, t_power: f64) -> f64 {
    poly.eval_normalized(ln_sigma, poly.degree()) * t_power
}

// ---------------------------------------------------------------------------
// D_G, B, B̃
// ---------------------------------------------------------------------------

/// `D_G^{ij} = a^{ik}∂ₖₗ(log G)a^{lj} + ½∂ₗ(log G)(a^{ki}∂ₖa^{lj} +
/// a^{kj}∂ₖa^{li} − a^{kl}∂ₖa^{ij}) + ½∂ₜa^{ij}`.
pub fn dg_matrix(w: &WeightEval) -> SigmaMat {
    let n = w.n;
    let a = &w.coeff.a;
    let da = &w.coeff.grad;
    SigmaMat::from_fn(n, |i, j| {
        let mut s = SP::constant(0.5 * w.coeff.dt[(i, j)]);
        for k in 0..n {
            for l in 0..n {
                let c = a[(i, k)] * a[(l, j)];
                if c != 0.0 {
                    s += w.hess[k * n + l] * (2.0 * c);
                }
            }
        }
        for l in 0..n {
            let mut c = 0.0;
            for k in 0..n {
                c += a[(k, i)] * da[k][(l, j)] + a[(k, j)] * da[k][(l, i)] - a[(k, l)] * da[k][(i, j)];
            }
            if c != 0.0 {
                s += w.grad[l] * c;
            }
        }
        s
    })
}

/// `B = 2D_G + A((∂ₜG − Δ̃G)/G − F)`.
pub fn b_matrix(w: &WeightEval) -> SigmaMat {
    dg_matrix(w) * 2.0 + SigmaMat::scaled_plain(&w.coeff.a, w.qg - w.f)
}

/// `8n²ΛE`, the decay-scaled coefficient in `B̃`.
pub fn decay_coefficient(params: &WeightParams) -> f64 {
    let n = params.bounds.n as f64;
    8.0 * n * n * params.bounds.big_lambda * params.bounds.e
}

/// `B̃` without its generic `−(C_B/t)I` term:
/// `4∂ₙₙΦ₁ a^{in}a^{nj} − 8n²ΛE(∂ₙΦ₁/|x|)I + HA`.
pub fn b_tilde_base(w: &WeightEval) -> SigmaMat {
    let n = w.n;
    let nn = n - 1;
    let a = &w.coeff.a;
    let c = decay_coefficient(&w.params);
    SigmaMat::from_fn(n, |i, j| {
        let mut s = w.phi1_n[2] * (4.0 * a[(i, nn)] * a[(nn, j)]) + w.h * a[(i, j)];
        if i == j {
            s -= w.q * c;
        }
        s
    })
}

/// `B̃ = b_tilde_base − (C_B/t)I`.
pub fn b_tilde(w: &WeightEval, c_b: f64) -> SigmaMat {
    b_tilde_base(w) - SigmaMat::scaled_identity(w.n, SP::constant(c_b / w.t))
}

/// Generic constant of `B̃` at one point.
///
/// `R(σ) = B − b_tilde_base − I/t` is affine in `σ`, `R = P₀ + σP₁`. The point
/// value is `max(0, −t·λ_min(R(γ)))` (the matrix with `Φ₁ ≡ 0`), and
/// `t·λ_min(P₁)` is returned alongside: when it is nonnegative, `R(σ) ≥ R(γ)`
/// for every `σ ≥ γ`, so the constant bounds `B ≥ B̃ + I/t` on `t ≤ 1`.
pub fn b_tilde_constant_at(w: &WeightEval) -> (f64, f64) {
    let r = b_matrix(w) - b_tilde_base(w) - SigmaMat::scaled_identity(w.n, SP::constant(1.0 / w.t));
    let at_gamma = linalg::min_eigenvalue(&linalg::symmetrize(&r.eval(w.params.gamma.ln())));
    let slope = linalg::min_eigenvalue(&linalg::symmetrize(&r.coefficient(1))) * w.t;
    ((-w.t * at_gamma).max(0.0), slope)
}

/// Supremum of [`b_tilde_constant_at`] over a sample cloud plus the report
/// of the slope condition.
#[derive(Debug, Clone, Serialize)]
pub struct BTildeConstant {
    pub c_b: f64,
    pub slope: MarginReport,
}

pub fn estimate_b_tilde_constant(
    field: &dyn CoefficientField,
    params: &WeightParams,
    samples: &[Sample],
    tol: f64,
) -> Result<BTildeConstant> {
    let vals = par_map(samples, |(x, t)| {
        weight_eval_unsmoothed(x, *t, field, params).map(|w| b_tilde_constant_at(&w))
    });
    let mut c_b = 0.0f64;
    let mut pts = Vec::with_capacity(samples.len());
    for ((x, t), v) in samples.iter().zip(vals) {
        let (c, slope) = v?;
        c_b = c_b.max(c);
        pts.push(MarginPoint {
            location: loc(x, *t),
            margin: slope,
        });
    }
    Ok(BTildeConstant {
        c_b,
        slope: MarginReport::from_points("b_tilde_slope", pts, tol).with_constant(c_b),
    })
}

fn loc(x: &[f64], t: f64) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(t);
    v
}

// ---------------------------------------------------------------------------
// M₂ and its split
// ---------------------------------------------------------------------------

/// `J₁ … J₆` of the half-space multiplier, each a σ-polynomial.
pub fn compute_j_terms(w: &WeightEval, c_b: f64) -> [SP; 6] {
    let n = w.n;
    let nn = n - 1;
    let a = &w.coeff.a;
    let da = &w.coeff.grad;
    let at = &w.coeff.dt;
    let div = w.coeff.divergence();
    let c = decay_coefficient(&w.params);
    let g = &w.grad;
    let idx = |i: usize, j: usize| i * n + j;

    let a_grad: Vec<SP> = (0..n).map(|i| (0..n).map(|j| g[j] * a[(i, j)]).sum()).collect();
    let a_gg = dot_sp(&a_grad, g);
    let grad_sq = dot_sp(g, g);
    let lap_phi: SP = (0..n).map(|i| w.hess[idx(i, i)]).sum();
    let d_term: SP = (0..n).map(|j| g[j] * div[j]).sum();
    let mut a_hess = SP::ZERO;
    let mut at_hess = SP::ZERO;
    let mut a_hess_t = SP::ZERO;
    let mut at_gg = SP::ZERO;
    let mut a_gt_g = SP::ZERO;
    for i in 0..n {
        for j in 0..n {
            a_hess += w.hess[idx(i, j)] * a[(i, j)];
            at_hess += w.hess[idx(i, j)] * at[(i, j)];
            a_hess_t += w.hess_t[idx(i, j)] * a[(i, j)];
            at_gg += g[i] * g[j] * at[(i, j)];
            a_gt_g += w.grad_t[i] * g[j] * a[(i, j)];
        }
    }
    let shift = w.q * c + c_b / w.t;

    let j1 = w.phi1_n[2] * a_grad[nn] * a_grad[nn] * 4.0;

    let a_grad_h: SP = (0..n).map(|i| a_grad[i] * w.grad_h[i]).sum();
    let grad_q_g = dot_sp(&w.grad_q, g);
    let j2 = -(shift * grad_sq) - (w.h - d_term * 4.0) * a_gg + a_grad_h - grad_q_g * c - shift * lap_phi;

    let mut j3 = SP::ZERO;
    for i in 0..n {
        for j in 0..n {
            let d_prod = da[i][(i, nn)] * a[(nn, j)] + a[(i, nn)] * da[i][(nn, j)];
            j3 += w.phi1_n[2] * g[j] * (4.0 * d_prod);
            j3 += w.phi1_n[2] * w.hess[idx(i, j)] * (4.0 * a[(i, nn)] * a[(nn, j)]);
        }
    }
    j3 += w.phi1_n[3] * a_grad[nn] * (4.0 * a[(nn, nn)]);

    let j4 = w.phi_tt + w.phi_t * (w.h - d_term * 2.0) - at_hess - a_hess_t + d_term * (w.h + a_hess) * 2.0
        - w.h_t * 0.5
        - w.h * w.h * 0.5;

    let j5 = (at_gg + a_gt_g * 2.0) * -2.0;

    let j6 = w.lap_f0 * 0.5;
    [j1, j2, j3, j4, j5, j6]
}

/// `M₂` as the sum of the six terms.
pub fn m2_from_terms(w: &WeightEval, c_b: f64) -> SP {
    compute_j_terms(w, c_b).into_iter().sum()
}

/// `M₂ = ⟨B̃∇Φ,∇Φ⟩ + div(B̃∇Φ) + ½∂ₜF + ½F((∂ₜG−Δ̃G)/G − F) + ½Δ̃F₀`, with
/// the divergence taken by Richardson-extrapolated central differences of
/// the closed-form field `B̃∇Φ` (coefficient-wise in σ, which does not
/// depend on `x`).
pub fn m2_direct(w: &WeightEval, c_b: f64, field: &dyn CoefficientField, h: f64) -> Result<SP> {
    let n = w.n;
    let field_at = |y: &[f64], k: usize| -> Result<SP> {
        let e = weight_eval_unsmoothed(y, w.t, field, &w.params)?;
        Ok(b_tilde(&e, c_b).apply(&e.grad)[k])
    };
    let mut div = SP::ZERO;
    for k in 0..n {
        let at = |off: f64| {
            let mut y = w.x.clone();
            y[k] += off;
            field_at(&y, k)
        };
        let d_half = (at(0.5 * h)? - at(-0.5 * h)?) * (1.0 / h);
        let d_full = (at(h)? - at(-h)?) * (0.5 / h);
        div += (d_half * 4.0 - d_full) * (1.0 / 3.0);
    }
    let bt = b_tilde(w, c_b);
    let quad = dot_sp(&bt.apply(&w.grad), &w.grad);
    Ok(quad + div + w.f_t * 0.5 + w.f * (w.qg - w.f) * 0.5 + w.lap_f0 * 0.5)
}

/// `|ΣJ − M₂_direct| / (1 + |M₂_direct|)` on values normalized by
/// `t³/max(1,σ)³`.
pub fn j_sum_residual(w: &WeightEval, c_b: f64, field: &dyn CoefficientField) -> Result<f64> {
    let direct = m2_direct(w, c_b, field, 1e-4)?;
    let split = m2_from_terms(w, c_b);
    let t3 = w.t.powi(3);
    let d = direct.eval_normalized(w.ln_sigma, 4) * t3;
    let s = split.eval_normalized(w.ln_sigma, 4) * t3;
    Ok((s - d).abs() / (1.0 + d.abs()))
}

// ---------------------------------------------------------------------------
// Prepared samples
// ---------------------------------------------------------------------------

/// Coefficients and mollified coefficients at each sample; independent of
/// the weight parameters, so reused across calibration trials.
pub struct PreparedSamples {
    pub samples: Vec<Sample>,
    pub coeff: Vec<CoeffEval>,
    pub moll: Vec<MollifiedEval>,
}

pub fn prepare_samples(field: &dyn CoefficientField, moll: &Mollifier, samples: &[Sample]) -> Result<PreparedSamples> {
    let mf = mollify_field(field, moll);
    let evals = par_map(samples, |(x, t)| -> Result<(CoeffEval, MollifiedEval)> {
        Ok((eval_coefficients(field, x, *t)?, mf.eval(x, *t)?))
    });
    let mut coeff = Vec::with_capacity(samples.len());
    let mut mo = Vec::with_capacity(samples.len());
    for e in evals {
        let (c, m) = e?;
        coeff.push(c);
        mo.push(m);
    }
    Ok(PreparedSamples {
        samples: samples.to_vec(),
        coeff,
        moll: mo,
    })
}

impl PreparedSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn weights(&self, params: &WeightParams) -> Result<Vec<WeightEval>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        par_map(&idx, |&i| {
            let (x, t) = &self.samples[i];
            weight_eval_with(x, *t, params, self.coeff[i].clone(), self.moll[i].clone())
        })
        .into_iter()
        .collect()
    }
}

fn check_time_floor(samples: &[Sample], upper: f64) -> Result<()> {
    for (_, t) in samples {
        if *t < T_FLOOR || *t >= upper {
            return Err(Error::argument(format!(
                "sample time {t} outside [{T_FLOOR}, {upper})"
            )));
        }
    }
    Ok(())
}

fn points(samples: &[Sample], margins: impl Iterator<Item = f64>) -> Vec<MarginPoint> {
    samples
        .iter()
        .zip(margins)
        .map(|((x, t), m)| MarginPoint {
            location: loc(x, *t),
            margin: m,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Whole-space estimates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct Lemma33Reports {
    /// `t·λ_min(B − (1/t + 1)I)`.
    pub matrix: MarginReport,
    /// `t³(∂ₜF + F(Q − F)) − db(|x|²+1)/4`, normalized.
    pub multiplier: MarginReport,
    /// `sup max(0, −Δ̃F₀)·t³/(|x|²+1)` with stability.
    pub smoothed_laplacian: MarginReport,
    /// `sup |∇(F−F₀)|·t²/(|x|+1)` with stability.
    pub smoothing_gradient: MarginReport,
}

impl Lemma33Reports {
    pub fn all(&self) -> Vec<&MarginReport> {
        vec![&self.matrix, &self.multiplier, &self.smoothed_laplacian, &self.smoothing_gradient]
    }

    pub fn combined(&self) -> MarginReport {
        MarginReport::combine("whole_space_estimates", self.all().into_iter().cloned().collect())
    }
}

fn whole_space_explicit(w: &WeightEval) -> (f64, f64) {
    let t = w.t;
    let n = w.n;
    let b = b_matrix(w) - SigmaMat::scaled_identity(n, SP::constant(1.0 / t + 1.0));
    let matrix_m = b.normalized_min_eigenvalue(w.ln_sigma, t);
    let r2 = linalg::dot(&w.x, &w.x);
    let p = w.params;
    let lhs = w.f_t + w.f * (w.qg - w.f) - p.d * p.b * (r2 + 1.0) / (4.0 * t * t * t);
    (matrix_m, normalized(&lhs, w.ln_sigma, t * t * t))
}

fn require_variant(params: &WeightParams, v: Variant) -> Result<()> {
    if params.variant != v {
        return Err(Error::argument(format!("check needs {v:?} parameters")));
    }
    Ok(())
}

/// Whole-space pointwise estimates on prepared samples.
pub fn check_lemma33_prepared(prep: &PreparedSamples, params: &WeightParams, tol: f64) -> Result<Lemma33Reports> {
    require_variant(params, Variant::Prop13)?;
    check_time_floor(&prep.samples, 2.0)?;
    let ws = prep.weights(params)?;
    let vals = par_map(&ws, |w| {
        let (matrix_m, mult_m) = whole_space_explicit(w);
        let r2 = linalg::dot(&w.x, &w.x);
        let t = w.t;
        let lap_c = (-w.val(&w.lap_f0)).max(0.0) * t.powi(3) / (r2 + 1.0);
        let diff: Vec<f64> = (0..w.n).map(|k| w.val(&(w.grad_f[k] - w.grad_f0[k]))).collect();
        let grad_c = linalg::norm(&diff) * t * t / (r2.sqrt() + 1.0);
        (matrix_m, mult_m, lap_c, grad_c)
    });
    let s = &prep.samples;
    Ok(Lemma33Reports {
        matrix: MarginReport::from_points("matrix_lower_bound", points(s, vals.iter().map(|v| v.0)), tol),
        multiplier: MarginReport::from_points("multiplier_lower_bound", points(s, vals.iter().map(|v| v.1)), tol),
        smoothed_laplacian: empirical_sup_report("smoothed_laplacian_constant", &vals.iter().map(|v| v.2).collect::<Vec<_>>()),
        smoothing_gradient: empirical_sup_report("smoothing_gradient_constant", &vals.iter().map(|v| v.3).collect::<Vec<_>>()),
    })
}

pub fn check_lemma33(
    field: &dyn CoefficientField,
    moll: &Mollifier,
    params: &WeightParams,
    samples: &[Sample],
    tol: f64,
) -> Result<Lemma33Reports> {
    require_variant(params, Variant::Prop13)?;
    check_time_floor(samples, 2.0)?;
    check_lemma33_prepared(&prepare_samples(field, moll, samples)?, params, tol)
}

// ---------------------------------------------------------------------------
// Half-space estimates
// ---------------------------------------------------------------------------

/// `(α−1)λ² − 16n²(κ+1)ΛE`, zero when `α = 1 + E/E₀`.
pub fn constants_identity_residual(params: &WeightParams) -> f64 {
    let b = params.bounds;
    let n = b.n as f64;
    (params.alpha - 1.0) * b.lambda * b.lambda - 16.0 * n * n * (b.kappa() + 1.0) * b.big_lambda * b.e
}

/// `2[(α−1)λ² − (16n²κ + 8n² + 4n)ΛE]`, the leading coefficient of the
/// multiplier lower bound.
pub fn leading_coefficient(params: &WeightParams) -> f64 {
    let b = params.bounds;
    let n = b.n as f64;
    2.0 * ((params.alpha - 1.0) * b.lambda * b.lambda - (16.0 * n * n * b.kappa() + 8.0 * n * n + 4.0 * n) * b.big_lambda * b.e)
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma34Reports {
    /// `t·λ_min(B̃ − 8n²ΛE(∂ₙΦ₁/|x| + 1/t)I)`, normalized; the slope
    /// condition behind `C_B` is a component.
    pub b_tilde: MarginReport,
    /// `t³(M₂ − RHS)`, normalized; the variant without the `1/t³` term is a
    /// component.
    pub multiplier: MarginReport,
    /// Empirical constant of the `C|x|/t²` term.
    pub smoothing_gradient: MarginReport,
    pub c_b: f64,
}

impl Lemma34Reports {
    pub fn all(&self) -> Vec<&MarginReport> {
        vec![&self.b_tilde, &self.multiplier, &self.smoothing_gradient]
    }

    pub fn combined(&self) -> MarginReport {
        MarginReport::combine("half_space_estimates", self.all().into_iter().cloned().collect())
    }
}

fn half_space_explicit(w: &WeightEval, c_b: f64) -> (f64, f64, f64) {
    let t = w.t;
    let n = w.n;
    let p = &w.params;
    let c = decay_coefficient(p);
    let b_tilde_m = (b_tilde(w, c_b) - SigmaMat::scaled_identity(n, (w.q + 1.0 / t) * c))
        .normalized_min_eigenvalue(w.ln_sigma, t);
    let r = linalg::norm(&w.x);
    let m2 = m2_from_terms(w, c_b);
    let d1 = w.phi1_n[1];
    let lead = d1 * d1 * d1 * (leading_coefficient(p) / r);
    let core = lead + p.b * p.d * r * r / (16.0 * t * t * t);
    let t3 = t * t * t;
    let full = m2 - core - 1.0 / t3;
    let partial = m2 - core;
    (b_tilde_m, normalized(&full, w.ln_sigma, t3), normalized(&partial, w.ln_sigma, t3))
}

/// Empirical constant `C` in `|∇(F−F₀)| ≤ 32nE[(∂ₙΦ₁)²/|x| + C|x|/t²]` at one
/// point; `None` for `E = 0`, where the left side must vanish and the
/// returned margin is `−|∇(F−F₀)|`.
fn smoothing_gradient_at(w: &WeightEval) -> (Option<f64>, f64) {
    let n = w.n;
    let e = w.params.bounds.e;
    let diff: Vec<SP> = (0..n).map(|k| w.grad_f[k] - w.grad_f0[k]).collect();
    let lhs = normalized_norm(&diff, w.ln_sigma, 2);
    if e == 0.0 {
        return (None, -lhs);
    }
    let r = linalg::norm(&w.x);
    let c = 32.0 * n as f64 * e;
    let lead = (w.phi1_n[1] * w.phi1_n[1]).eval_normalized(w.ln_sigma, 2) / r;
    let excess = lhs / c - lead;
    if excess <= 0.0 {
        return (Some(0.0), 0.0);
    }
    let ln_c = excess.ln() + 2.0 * w.ln_sigma.max(0.0) + 2.0 * w.t.ln() - r.ln();
    (Some(ln_c.exp()), 0.0)
}

fn check_half_space_params(params: &WeightParams) -> Result<()> {
    require_variant(params, Variant::Prop14)?;
    let e0 = decay_threshold(&params.bounds);
    if params.bounds.e >= e0 {
        return Err(Error::hypothesis(format!(
            "decay constant E = {} is not below E0 = {e0}",
            params.bounds.e
        )));
    }
    Ok(())
}

fn check_half_space_samples(samples: &[Sample]) -> Result<()> {
    check_time_floor(samples, 1.0)?;
    if let Some((x, _)) = samples.iter().find(|(x, _)| x[x.len() - 1] < 1.0) {
        return Err(Error::domain(format!("sample {x:?} has x_n < 1")));
    }
    Ok(())
}

pub fn check_lemma34_prepared(
    field: &dyn CoefficientField,
    prep: &PreparedSamples,
    params: &WeightParams,
    c_b: Option<&BTildeConstant>,
    tol: f64,
) -> Result<Lemma34Reports> {
    check_half_space_params(params)?;
    check_half_space_samples(&prep.samples)?;
    let owned;
    let cb = match c_b {
        Some(c) => c,
        None => {
            owned = estimate_b_tilde_constant(field, params, &prep.samples, tol)?;
            &owned
        }
    };
    let ws = prep.weights(params)?;
    let vals = par_map(&ws, |w| {
        let (b_tilde_m, mult_m, mult_core_m) = half_space_explicit(w, cb.c_b);
        let (grad_c, grad_m) = smoothing_gradient_at(w);
        (b_tilde_m, mult_m, mult_core_m, grad_c, grad_m)
    });
    let s = &prep.samples;
    let bt = MarginReport::combine(
        "b_tilde_lower_bound",
        vec![
            MarginReport::from_points("b_tilde_margin", points(s, vals.iter().map(|v| v.0)), tol).with_constant(cb.c_b),
            cb.slope.clone(),
        ],
    )
    .with_constant(cb.c_b);
    let m2 = MarginReport::combine(
        "multiplier_lower_bound",
        vec![
            MarginReport::from_points("multiplier_margin", points(s, vals.iter().map(|v| v.1)), tol),
            MarginReport::from_points("multiplier_margin_without_unit_term", points(s, vals.iter().map(|v| v.2)), tol),
        ],
    );
    let grad = if params.bounds.e == 0.0 {
        MarginReport::from_points("smoothing_gradient_vanishes", points(s, vals.iter().map(|v| v.4)), tol)
            .with_constant(0.0)
    } else {
        let cs: Vec<f64> = vals.iter().map(|v| v.3.unwrap_or(0.0)).collect();
        empirical_sup_report("smoothing_gradient_constant", &cs)
    };
    Ok(Lemma34Reports {
        b_tilde: bt,
        multiplier: m2,
        smoothing_gradient: grad,
        c_b: cb.c_b,
    })
}

pub fn check_lemma34(
    field: &dyn CoefficientField,
    moll: &Mollifier,
    params: &WeightParams,
    samples: &[Sample],
    tol: f64,
) -> Result<Lemma34Reports> {
    check_half_space_params(params)?;
    check_half_space_samples(samples)?;
    check_lemma34_prepared(field, &prepare_samples(field, moll, samples)?, params, None, tol)
}

// ---------------------------------------------------------------------------
// ψ properties
// ---------------------------------------------------------------------------

/// `ψ` properties on samples with `xₙ > 0`: the lower bound `ψ ≥ |x|²/2`, the
/// gradient bound `|∇ψ| ≤ 4(κ+1)²|x|`, the flux bound
/// `a^{ni}∂ᵢψ ≤ (4κ²+2κ+2)Λxₙ`, and the empirical constant of the Hessian
/// upper bound and the decay `|∇ᵏψ| ≤ C/|x|^{k−2}`, `k = 2, 3, 4`.
pub fn check_psi_props(kappa: f64, field: &dyn CoefficientField, samples: &[Sample], tol: f64) -> Result<MarginReport> {
    if let Some((x, _)) = samples.iter().find(|(x, _)| !(x[x.len() - 1] > 0.0)) {
        return Err(Error::domain(format!("sample {x:?} has x_n <= 0")));
    }
    let big_lambda = field.bounds().big_lambda;
    let vals = par_map(samples, |(x, t)| -> Result<[f64; 4]> {
        let n = x.len();
        let r = linalg::norm(x);
        let p = psi_eval(x, kappa)?;
        let lower = psi_value(x, kappa) - 0.5 * r * r;
        let grad = 4.0 * (kappa + 1.0).powi(2) * r - linalg::norm(&p.grad);
        let a = eval_coefficients(field, x, *t)?.a;
        let flux: f64 = (0..n).map(|i| a[(n - 1, i)] * p.grad[i]).sum();
        let c_flux = (4.0 * kappa * kappa + 2.0 * kappa + 2.0) * big_lambda;
        let flux_margin = c_flux * x[n - 1] - flux;
        let hess = Mat::from_row_slice(n, n, &p.hess);
        let fro = |v: &[f64]| linalg::norm(v);
        let decay = linalg::max_eigenvalue(&hess)
            .max(fro(&p.hess))
            .max(fro(&p.d3) * r)
            .max(fro(&p.d4) * r * r);
        Ok([lower, grad, flux_margin, decay])
    });
    let vals: Vec<[f64; 4]> = vals.into_iter().collect::<Result<_>>()?;
    let col = |k: usize| points(samples, vals.iter().map(move |v| v[k]));
    let decay: Vec<f64> = vals.iter().map(|v| v[3]).collect();
    Ok(MarginReport::combine(
        "psi_properties",
        vec![
            MarginReport::from_points("psi_lower_bound", col(0), 1e-12),
            MarginReport::from_points("psi_gradient_bound", col(1), tol),
            MarginReport::from_points("psi_normal_flux_bound", col(2), tol),
            empirical_sup_report("psi_derivative_decay_constant", &decay),
        ],
    ))
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Default geometric grid `{1, 2, 4, …, 1024}`.
pub fn default_d_grid() -> Vec<f64> {
    (0..=10).map(|k| f64::powi(2.0, k)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub d: f64,
    pub params: WeightParams,
    /// Explicit-constant margins at the returned `d`.
    pub reports: Vec<MarginReport>,
    /// `(d, min margin)` for every trial.
    pub trials: Vec<(f64, f64)>,
}

/// Explicit-constant margins for one `d`.
fn explicit_margins(
    prep: &PreparedSamples,
    params: &WeightParams,
    cb: Option<&BTildeConstant>,
    tol: f64,
) -> Result<Vec<MarginReport>> {
    let ws = prep.weights(params)?;
    let s = &prep.samples;
    match params.variant {
        Variant::Prop13 => {
            let vals = par_map(&ws, whole_space_explicit);
            Ok(vec![
                MarginReport::from_points("matrix_lower_bound", points(s, vals.iter().map(|v| v.0)), tol),
                MarginReport::from_points("multiplier_lower_bound", points(s, vals.iter().map(|v| v.1)), tol),
            ])
        }
        Variant::Prop14 => {
            let cb = cb.expect("half-space calibration needs the B̃ constant");
            let vals = par_map(&ws, |w| half_space_explicit(w, cb.c_b));
            Ok(vec![
                MarginReport::from_points("b_tilde_margin", points(s, vals.iter().map(|v| v.0)), tol)
                    .with_constant(cb.c_b),
                MarginReport::from_points("multiplier_margin", points(s, vals.iter().map(|v| v.1)), tol),
                cb.slope.clone(),
            ])
        }
    }
}

/// Smallest `d` in `d_grid` for which every explicit-constant margin of the
/// variant passes; `K` follows `d` at each trial.
pub fn calibrate_d(
    field: &dyn CoefficientField,
    moll: &Mollifier,
    template: &WeightParams,
    samples: &[Sample],
    d_grid: &[f64],
    tol: f64,
) -> Result<Calibration> {
    if d_grid.is_empty() {
        return Err(Error::argument("empty d grid"));
    }
    match template.variant {
        Variant::Prop13 => check_time_floor(samples, 2.0)?,
        Variant::Prop14 => {
            check_half_space_params(template)?;
            check_half_space_samples(samples)?;
        }
    }
    let prep = prepare_samples(field, moll, samples)?;
    let cb = match template.variant {
        Variant::Prop14 => Some(estimate_b_tilde_constant(field, template, samples, tol)?),
        Variant::Prop13 => None,
    };
    let mut trials = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for &d in d_grid {
        let params = template.with_d(d);
        let reports = explicit_margins(&prep, &params, cb.as_ref(), tol)?;
        let combined = MarginReport::combine("calibration", reports.clone());
        trials.push((d, combined.min_margin));
        worst = combined.min_margin;
        if combined.pass {
            return Ok(Calibration {
                d,
                params: params.mark_calibrated(),
                reports,
                trials,
            });
        }
    }
    Err(Error::Calibration {
        message: format!("no d in {d_grid:?} passes the explicit margins"),
        worst_margin: worst,
    })
}

// ---------------------------------------------------------------------------
// Sample clouds
// ---------------------------------------------------------------------------

/// Whole-space samples: `x` uniform in `[−r, r]ⁿ`, `t` log-uniform on
/// `[T_FLOOR, t_max]`.
pub fn whole_space_samples(n: usize, count: usize, r: f64, t_max: f64, seed: u64) -> Vec<Sample> {
    let mut g = rng(seed);
    (0..count)
        .map(|_| {
            let x = sample_box(&mut g, &vec![-r; n], &vec![r; n]);
            (x, sample_log(&mut g, T_FLOOR, t_max))
        })
        .collect()
}

/// Half-space samples: `x` uniform in `[−r, r]^{n−1} × [1, r]`, `t`
/// log-uniform on `[T_FLOOR, t_max]` with `t_max < 1`.
pub fn half_space_samples(n: usize, count: usize, r: f64, t_max: f64, seed: u64) -> Vec<Sample> {
    let mut g = rng(seed);
    let mut lo = vec![-r; n];
    lo[n - 1] = 1.0;
    (0..count)
        .map(|_| {
            let x = sample_box(&mut g, &lo, &vec![r; n]);
            (x, sample_log(&mut g, T_FLOOR, t_max))
        })
        .collect()
}

/// `α` for a bound set, with the floor used when `E = 0`.
pub fn default_alpha(e: f64, e0: f64) -> f64 {
    (1.0 + e / e0).max(ALPHA_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::threshold_fraction_field;
    use crate::fields::{ConstantField, DomainTag, RadialField};
    use crate::weights::{default_constants, weight_eval};
    use proptest::prelude::*;

    fn moll() -> Mollifier {
        Mollifier::new(2, 0.5).unwrap()
    }

    fn whole(field: &dyn CoefficientField, d: f64, gamma: f64) -> WeightParams {
        default_constants(&field.bounds(), Variant::Prop13, d, 1.0, gamma).unwrap().params
    }

    fn half(field: &dyn CoefficientField, d: f64, gamma: f64) -> WeightParams {
        default_constants(&field.bounds(), Variant::Prop14, d, 1.0, gamma).unwrap().params
    }

    #[test]
    fn dg_for_identity_is_scaled_identity() {
        let f = ConstantField::identity(2);
        let p = whole(&f, 2.0, 1.0);
        for (x, t) in [(vec![0.3, -1.0], 0.5), (vec![4.0, 2.0], 1.7)] {
            let w = weight_eval(&x, t, &f, &moll(), &p).unwrap();
            let d = dg_matrix(&w).eval(w.ln_sigma);
            let expect = -2.0 * p.b / t;
            assert!((d[(0, 0)] - expect).abs() < 1e-14 && (d[(1, 1)] - expect).abs() < 1e-14);
            assert_eq!(d[(0, 1)], 0.0);
        }
    }

    #[test]
    fn dg_is_symmetric_for_variable_fields() {
        let r = RadialField::new(2, 0.7, 0.4).unwrap();
        let c = threshold_fraction_field(0.5).unwrap();
        let cases: [(&dyn CoefficientField, WeightParams, Vec<f64>, f64); 2] = [
            (&r, whole(&r, 2.0, 1.0), vec![0.8, -1.2], 0.9),
            (&c, half(&c, 2.0, 1.0), vec![-0.4, 2.5], 0.7),
        ];
        for (f, p, x, t) in cases {
            let w = weight_eval(&x, t, f, &moll(), &p).unwrap();
            let d = dg_matrix(&w).eval(w.ln_sigma);
            assert!((d[(0, 1)] - d[(1, 0)]).abs() <= 1e-12 * linalg::max_abs(&d).max(1.0));
        }
    }

    #[test]
    fn whole_space_matrix_margin_closed_form() {
        let f = ConstantField::identity(2);
        for d in [1.0, 2.0, 4.0] {
            let p = whole(&f, d, 1.0);
            let s = whole_space_samples(2, 200, 5.0, 1.99, 3);
            let r = check_lemma33(&f, &moll(), &p, &s, DEFAULT_TOL).unwrap();
            for pt in &r.matrix.points {
                let t = pt.location[2];
                let expect = t * ((d - 1.0) * (1.0 / t + 1.0) - 4.0 * p.b / t);
                assert!((pt.margin - expect).abs() < 1e-10, "d={d} t={t}");
            }
            assert_eq!(r.matrix.pass, d >= 2.0);
            assert_eq!(r.smoothing_gradient.empirical_constant, Some(0.0));
        }
    }

    #[test]
    fn calibration_on_identity() {
        let f = ConstantField::identity(2);
        let s = whole_space_samples(2, 500, 10.0, 1.999, 4);
        let p = whole(&f, 1.0, 1.0);
        let c = calibrate_d(&f, &moll(), &p, &s, &default_d_grid(), DEFAULT_TOL).unwrap();
        assert_eq!(c.d, 2.0);
        assert!(c.params.calibrated);
        assert_eq!(c.params.k, 24.0);
        assert!(matches!(
            calibrate_d(&f, &moll(), &p, &s, &[1.0], DEFAULT_TOL),
            Err(Error::Calibration { .. })
        ));
        let c = calibrate_d(&f, &moll(), &p, &s, &[8.0], DEFAULT_TOL).unwrap();
        assert_eq!(c.d, 8.0);
    }

    #[test]
    fn time_floor_is_enforced() {
        let f = ConstantField::identity(2);
        let s = vec![(vec![0.0, 1.0], 1e-4)];
        assert!(matches!(
            check_lemma33(&f, &moll(), &whole(&f, 2.0, 1.0), &s, DEFAULT_TOL),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn d_monotonicity() {
        let f = RadialField::new(2, 0.6, 0.3).unwrap();
        let s = whole_space_samples(2, 300, 8.0, 1.99, 5);
        let prep = prepare_samples(&f, &moll(), &s).unwrap();
        for d in [2.0, 4.0, 8.0] {
            let at = |d: f64| {
                let r = check_lemma33_prepared(&prep, &whole(&f, d, 1.0), DEFAULT_TOL).unwrap();
                r.matrix.pass && r.multiplier.pass
            };
            if at(d) {
                assert!(at(2.0 * d));
            }
        }
        let c = threshold_fraction_field(0.5).unwrap();
        let s = half_space_samples(2, 300, 8.0, 0.999, 6);
        let prep = prepare_samples(&c, &moll(), &s).unwrap();
        let cb = estimate_b_tilde_constant(&c, &half(&c, 1.0, 1.0), &s, DEFAULT_TOL).unwrap();
        for d in [2.0, 4.0, 8.0] {
            let at = |d: f64| {
                let r = check_lemma34_prepared(&c, &prep, &half(&c, d, 1.0), Some(&cb), DEFAULT_TOL).unwrap();
                r.b_tilde.pass && r.multiplier.pass
            };
            if at(d) {
                assert!(at(2.0 * d));
            }
        }
    }

    #[test]
    fn j_terms_match_direct_multiplier() {
        let c = threshold_fraction_field(0.5).unwrap();
        let r = RadialField::new(2, 0.002, 0.5).unwrap().on_domain(DomainTag::HalfSpace0_1);
        for (f, seed) in [(&c as &dyn CoefficientField, 7), (&r, 8)] {
            let p = half(f, 4.0, 1.0);
            let s = half_space_samples(2, 40, 8.0, 0.999, seed);
            for (x, t) in &s {
                let w = weight_eval(x, *t, f, &moll(), &p).unwrap();
                let res = j_sum_residual(&w, 1.3, f).unwrap();
                assert!(res <= 1e-6, "{res} at {x:?}, {t}");
            }
        }
    }

    #[test]
    fn first_term_vanishes_where_gamma_term_does() {
        let c = threshold_fraction_field(0.5).unwrap();
        let p = half(&c, 2.0, 1.0);
        let w = weight_eval(&[0.5, 2.0], 1.0, &c, &moll(), &p).unwrap();
        assert!(w.val(&compute_j_terms(&w, 1.0)[0]).abs() < 1e-12);
    }

    #[test]
    fn half_space_constants() {
        for frac in [0.25, 0.5] {
            let f = threshold_fraction_field(frac).unwrap();
            let b = f.bounds();
            let e0 = decay_threshold(&b);
            assert!((b.e / e0 - frac).abs() < 1e-12);
            let p = half(&f, 2.0, 1.0);
            assert!(constants_identity_residual(&p).abs() <= 1e-12);
        }
        for n in [2usize, 3] {
            for kappa in [1.0, 2.0, 5.0] {
                let base = crate::fields::EllipticityBounds::new(n, 1.0, kappa, 0.0, 0.0).unwrap();
                let e0 = decay_threshold(&base);
                for frac in [1e-3, 0.25, 0.5, 0.999] {
                    let b = crate::fields::EllipticityBounds { e: frac * e0, ..base };
                    let p = default_constants(&b, Variant::Prop14, 2.0, 1.0, 1.0).unwrap().params;
                    assert!(leading_coefficient(&p) > 0.0, "n={n} kappa={kappa} frac={frac}");
                }
            }
        }
    }

    #[test]
    fn half_space_estimates_pass_after_calibration() {
        let fc = ConstantField::identity_on(2, DomainTag::HalfSpace0_1);
        let fe = threshold_fraction_field(0.5).unwrap();
        let s = half_space_samples(2, 400, 10.0, 0.999, 9);
        for f in [&fc as &dyn CoefficientField, &fe] {
            let p = half(f, 1.0, 1.0);
            let cal = calibrate_d(f, &moll(), &p, &s, &default_d_grid(), DEFAULT_TOL).unwrap();
            let r = check_lemma34(f, &moll(), &cal.params, &s, DEFAULT_TOL).unwrap();
            assert!(r.b_tilde.pass && r.multiplier.pass, "{}", f.name());
            assert!(r.smoothing_gradient.pass);
        }
        let r = check_lemma34(&fc, &moll(), &half(&fc, 2.0, 1.0), &s, DEFAULT_TOL).unwrap();
        assert_eq!(r.smoothing_gradient.name, "smoothing_gradient_vanishes");
    }

    #[test]
    fn half_space_hypotheses() {
        let f = ConstantField::identity_on(2, DomainTag::HalfSpace0_1);
        let mut p = half(&f, 2.0, 1.0);
        let s = vec![(vec![0.0, 0.5], 0.5)];
        assert!(matches!(check_lemma34(&f, &moll(), &p, &s, DEFAULT_TOL), Err(Error::Domain(_))));
        p.bounds.e = 1.0;
        let s = vec![(vec![0.0, 2.0], 0.5)];
        assert!(matches!(check_lemma34(&f, &moll(), &p, &s, DEFAULT_TOL), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn psi_property_examples() {
        let f = ConstantField::identity_on(2, DomainTag::HalfSpace0_1);
        let r = check_psi_props(1.0, &f, &[(vec![0.0, 1.0], 0.5)], DEFAULT_TOL).unwrap();
        assert!((r.find("psi_normal_flux_bound").unwrap().min_margin - 6.0).abs() < 1e-14);
        let r = check_psi_props(2.0, &f, &[(vec![0.0, 1.0], 0.5)], DEFAULT_TOL).unwrap();
        assert!((r.find("psi_gradient_bound").unwrap().min_margin - 26.0).abs() < 1e-13);
        assert_eq!(r.components.len(), 4);
        assert!(r.pass);
        assert!(check_psi_props(1.0, &f, &[(vec![1.0, 0.0], 0.5)], DEFAULT_TOL).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn b_tilde_remainder_is_affine_in_sigma(x0 in -5.0..5.0f64, x1 in 1.0..6.0f64, t in 0.01..0.99f64) {
            let c = threshold_fraction_field(0.5).unwrap();
            let p = half(&c, 2.0, 1.0);
            let w = weight_eval_unsmoothed(&[x0, x1], t, &c, &p).unwrap();
            let r = b_matrix(&w) - b_tilde_base(&w);
            for k in 2..=4 {
                prop_assert!(linalg::max_abs(&r.coefficient(k)) <= 1e-12);
            }
        }
    }
}
