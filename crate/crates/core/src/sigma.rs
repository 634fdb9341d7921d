//! Polynomials in the large parameter `σ = γ t^{−K}`.
//!
//! Weight quantities grow like powers of `t^{−K}`, which overflows `f64` for
//! moderate `K` and small `t`. Every such quantity is a polynomial of low
//! degree in `σ` whose coefficients are ordinary bounded numbers, so it is
//! stored by coefficients and evaluated either exactly (when `σ` is
//! representable) or after division by `max(1, σ)^D`, which preserves sign.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// Highest power of `σ` that can be stored.
pub const MAX_DEGREE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SigmaPoly {
    pub c: [f64; MAX_DEGREE + 1],
}

impl SigmaPoly {
    pub const ZERO: SigmaPoly = SigmaPoly {
        c: [0.0; MAX_DEGREE + 1],
    };

    pub fn constant(v: f64) -> Self {
        let mut c = [0.0; MAX_DEGREE + 1];
        c[0] = v;
        SigmaPoly { c }
    }

    /// `v·σ`.
    pub fn linear(v: f64) -> Self {
        let mut c = [0.0; MAX_DEGREE + 1];
        c[1] = v;
        SigmaPoly { c }
    }

    /// `a + b·σ`.
    pub fn affine(a: f64, b: f64) -> Self {
        let mut c = [0.0; MAX_DEGREE + 1];
        c[0] = a;
        c[1] = b;
        SigmaPoly { c }
    }

    /// Index of the highest nonzero coefficient (0 for the zero polynomial).
    pub fn degree(&self) -> usize {
        (0..=MAX_DEGREE).rev().find(|&k| self.c[k] != 0.0).unwrap_or(0)
    }

    pub fn scale(self, s: f64) -> Self {
        let mut c = self.c;
        c.iter_mut().for_each(|v| *v *= s);
        SigmaPoly { c }
    }

    /// Plain evaluation at `σ = exp(ln_sigma)`; may overflow for large `σ`.
    pub fn eval(&self, ln_sigma: f64) -> f64 {
        let s = ln_sigma.exp();
        self.c.iter().rev().fold(0.0, |acc, v| acc * s + v)
    }

    /// `Σ cₖσᵏ / max(1,σ)^deg`, computed without forming `σᵏ`.
    ///
    /// Panics in debug builds if `deg` is below the polynomial's degree.
    pub fn eval_normalized(&self, ln_sigma: f64, deg: usize) -> f64 {
        debug_assert!(deg >= self.degree(), "normalizing degree too small");
        let shift = ln_sigma.max(0.0) * deg as f64;
        self.c
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, v)| v * (k as f64 * ln_sigma - shift).exp())
            .sum()
    }

    /// Coefficient-wise map, useful for finite differences in `x` at fixed `t`.
    pub fn zip_with(self, other: SigmaPoly, f: impl Fn(f64, f64) -> f64) -> Self {
        let c = std::array::from_fn(|k| f(self.c[k], other.c[k]));
        SigmaPoly { c }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.c.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }
}

impl Add for SigmaPoly {
    type Output = SigmaPoly;
    fn add(self, o: SigmaPoly) -> SigmaPoly {
        self.zip_with(o, |a, b| a + b)
    }
}

impl Sub for SigmaPoly {
    type Output = SigmaPoly;
    fn sub(self, o: SigmaPoly) -> SigmaPoly {
        self.zip_with(o, |a, b| a - b)
    }
}

impl AddAssign for SigmaPoly {
    fn add_assign(&mut self, o: SigmaPoly) {
        *self = *self + o;
    }
}

impl SubAssign for SigmaPoly {
    fn sub_assign(&mut self, o: SigmaPoly) {
        *self = *self - o;
    }
}

impl Neg for SigmaPoly {
    type Output = SigmaPoly;
    fn neg(self) -> SigmaPoly {
        self.scale(-1.0)
    }
}

impl Mul for SigmaPoly {
    type Output = SigmaPoly;
    fn mul(self, o: SigmaPoly) -> SigmaPoly {
        let (da, db) = (self.degree(), o.degree());
        assert!(da + db <= MAX_DEGREE, "σ-degree overflow: {da} + {db}");
        let mut c = [0.0; MAX_DEGREE + 1];
        for i in 0..=da {
            for j in 0..=db {
                c[i + j] += self.c[i] * o.c[j];
            }
        }
        SigmaPoly { c }
    }
}

impl Mul<f64> for SigmaPoly {
    type Output = SigmaPoly;
    fn mul(self, s: f64) -> SigmaPoly {
        self.scale(s)
    }
}

impl Mul<SigmaPoly> for f64 {
    type Output = SigmaPoly;
    fn mul(self, p: SigmaPoly) -> SigmaPoly {
        p.scale(self)
    }
}

impl Add<f64> for SigmaPoly {
    type Output = SigmaPoly;
    fn add(self, v: f64) -> SigmaPoly {
        self + SigmaPoly::constant(v)
    }
}

impl Sub<f64> for SigmaPoly {
    type Output = SigmaPoly;
    fn sub(self, v: f64) -> SigmaPoly {
        self - SigmaPoly::constant(v)
    }
}

impl std::iter::Sum for SigmaPoly {
    fn sum<I: Iterator<Item = SigmaPoly>>(iter: I) -> SigmaPoly {
        iter.fold(SigmaPoly::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn product_and_degree() {
        let p = SigmaPoly::affine(1.0, 2.0);
        let q = p * p;
        assert_eq!(q.c[..3], [1.0, 4.0, 4.0]);
        assert_eq!(q.degree(), 2);
        assert_eq!(SigmaPoly::ZERO.degree(), 0);
    }

    #[test]
    fn normalized_evaluation_survives_huge_sigma() {
        let p = SigmaPoly::affine(-5.0, 2.0) * SigmaPoly::linear(1.0);
        let v = p.eval_normalized(2000.0, 2);
        assert!((v - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalized_matches_plain(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64,
                                    ls in -5.0..5.0f64) {
            let p = SigmaPoly { c: [a, b, c, 0.0, 0.0] };
            let plain = p.eval(ls);
            let norm = p.eval_normalized(ls, 2) * ls.exp().max(1.0).powi(2);
            prop_assert!((plain - norm).abs() <= 1e-9 * (1.0 + plain.abs()));
        }

        #[test]
        fn normalization_preserves_sign(a in -10.0..10.0f64, b in -10.0..10.0f64, ls in -5.0..50.0f64) {
            let p = SigmaPoly::affine(a, b);
            let plain = a + b * ls.exp();
            let n = p.eval_normalized(ls, 1);
            if plain.abs() > 1e-9 * (1.0 + ls.exp()) {
                prop_assert_eq!(plain.signum(), n.signum());
            }
        }
    }
}
