//! Second-order forward-mode jets.

use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic the scalar network path needs. Implemented by `f64` and by
/// [`Jet2`] over any `Scalar`, so jets nest (`Jet2<Jet2<f64>>` carries
/// mixed derivatives).
pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn constant(v: f64) -> Self;
    fn scale(self, k: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    /// Plain value, all derivative parts dropped.
    fn value(&self) -> f64;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn value(&self) -> f64 {
        *self
    }
}

/// Value with first and second derivative along one direction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet2<S = f64> {
    pub v: S,
    pub d1: S,
    pub d2: S,
}

impl<S: Scalar> Jet2<S> {
    pub fn new(v: S, d1: S, d2: S) -> Self {
        Self { v, d1, d2 }
    }

    /// The independent variable itself: unit first derivative.
    pub fn variable(v: S) -> Self {
        Self::new(v, S::constant(1.0), S::constant(0.0))
    }

    /// `f(self)` given `f`, `f'`, `f''` at the value.
    fn chain(self, f: S, df: S, ddf: S) -> Self {
        Self { v: f, d1: df * self.d1, d2: ddf * self.d1 * self.d1 + df * self.d2 }
    }
}

impl<S: Scalar> Add for Jet2<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2)
    }
}

impl<S: Scalar> Sub for Jet2<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2)
    }
}

impl<S: Scalar> Neg for Jet2<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d1, -self.d2)
    }
}

impl<S: Scalar> Mul for Jet2<S> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + (self.d1 * o.d1).scale(2.0) + self.v * o.d2,
        }
    }
}

impl<S: Scalar> Scalar for Jet2<S> {
    fn constant(v: f64) -> Self {
        Self::new(S::constant(v), S::constant(0.0), S::constant(0.0))
    }
    fn scale(self, k: f64) -> Self {
        Self::new(self.v.scale(k), self.d1.scale(k), self.d2.scale(k))
    }
    fn sin(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(c, -s, -c)
    }
    fn value(&self) -> f64 {
        self.v.value()
    }
}

/// Snake activation `z + sin^2(a z) / a`.
pub fn snake<S: Scalar>(z: S, a: f64) -> S {
    let s = z.scale(a).sin();
    z + (s * s).scale(1.0 / a)
}

/// Snake and its first three derivatives at `z`:
/// `(z + sin^2(az)/a, 1 + sin(2az), 2a cos(2az), -4a^2 sin(2az))`.
#[inline]
pub fn snake_derivatives(z: f64, a: f64) -> (f64, f64, f64, f64) {
    let (s2, c2) = (2.0 * a * z).sin_cos();
    (z + (1.0 - c2) / (2.0 * a), 1.0 + s2, 2.0 * a * c2, -4.0 * a * a * s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    proptest! {
        #[test]
        fn leibniz_rule(x in -3.0f64..3.0) {
            // f = x^2 sin(x): f' = 2x sin + x^2 cos, f'' = 2 sin + 4x cos - x^2 sin
            let j = Jet2::variable(x);
            let f = j * j * j.sin();
            let (s, c) = x.sin_cos();
            prop_assert!(close(f.v, x * x * s, 1e-12));
            prop_assert!(close(f.d1, 2.0 * x * s + x * x * c, 1e-12));
            prop_assert!(close(f.d2, 2.0 * s + 4.0 * x * c - x * x * s, 1e-12));
        }

        #[test]
        fn faa_di_bruno(x in -3.0f64..3.0, k in 0.1f64..4.0) {
            // f = cos(k sin x)
            let f = Jet2::variable(x).sin().scale(k).cos();
            let (s, c) = x.sin_cos();
            let inner = k * s;
            let d1 = -inner.sin() * k * c;
            let d2 = -inner.cos() * (k * c).powi(2) + inner.sin() * k * s;
            prop_assert!(close(f.d1, d1, 1e-12));
            prop_assert!(close(f.d2, d2, 1e-12));
        }

        #[test]
        fn snake_matches_closed_form(z in -5.0f64..5.0, a in 0.2f64..3.0) {
            let j = snake(Jet2::variable(z), a);
            let (v, d1, d2, _) = snake_derivatives(z, a);
            prop_assert!(close(j.v, v, 1e-12));
            prop_assert!(close(j.d1, d1, 1e-12));
            prop_assert!(close(j.d2, d2, 1e-12));
        }
    }

    #[test]
    fn snake_examples() {
        assert_eq!(snake(0.0, 1.0), 0.0);
        assert!((snake(std::f64::consts::PI, 1.0) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn snake_derivative_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let z: f64 = rng.gen_range(-4.0..4.0);
            let a = 1.0;
            let (_, d1, d2, d3) = snake_derivatives(z, a);
            let fd1 = (snake(z + h, a) - snake(z - h, a)) / (2.0 * h);
            let fd3 = (snake_derivatives(z + h, a).2 - snake_derivatives(z - h, a).2) / (2.0 * h);
            let fd2 = (snake_derivatives(z + h, a).1 - snake_derivatives(z - h, a).1) / (2.0 * h);
            assert!((fd1 - d1).abs() <= 1e-8 * d1.abs().max(1.0));
            assert!((fd2 - d2).abs() <= 1e-8 * d2.abs().max(1.0));
            assert!((fd3 - d3).abs() <= 1e-8 * d3.abs().max(1.0));
        }
    }

    #[test]
    fn nested_jets_give_mixed_derivative() {
        // f(x, t) = sin(x t): f_xt = cos(xt) - xt sin(xt)
        let (x, t) = (0.7, -1.3);
        let xj = Jet2::new(Jet2::constant(x), Jet2::constant(1.0), Jet2::constant(0.0));
        let tj = Jet2::constant(0.0) + Jet2::new(Jet2::variable(t), Jet2::constant(0.0), Jet2::constant(0.0));
        let f = (xj * tj).sin();
        let expect = (x * t).cos() - x * t * (x * t).sin();
        assert!((f.d1.d1 - expect).abs() < 1e-14);
    }
}
