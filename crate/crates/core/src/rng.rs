//! Seeded standard-normal sampling.
//!
//! Uniforms come from ChaCha8 (a counter-mode stream cipher, so the stream is
//! a pure function of the 64-bit seed on every platform); normals are made in
//! pairs by the Box–Muller transform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::math;

pub struct GaussianRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on (0, 1].
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform_open0();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let (s, c) = math::sin_cos(core::f64::consts::TAU * u2);
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.normal();
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_open0_never_zero() {
        let mut rng = GaussianRng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform_open0();
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = GaussianRng::new(42);
        let mut b = GaussianRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
