//! Gauss–Hermite rules for expectations under one- and two-dimensional
//! centred Gaussians.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::cholesky_2x2;
use crate::math;

/// Correlations this close to ±1 are integrated along the diagonal.
pub const COMONOTONE_RHO: f64 = 1.0 - 1e-10;

/// Overshoot of |ρ| past 1 that is clamped rather than rejected.
pub const RHO_CLAMP: f64 = 1e-12;

/// An `n`-point rule rescaled to the standard normal: `E[f(Z)] ≈ Σ pᵢ f(zᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    probs: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are the eigenvalues of the symmetric tridiagonal
    /// Jacobi matrix of the probabilists' Hermite recurrence (zero diagonal,
    /// off-diagonal `√k`), weights the squared first eigenvector components.
    /// The eigenproblem is solved by implicit QL, tracking only that first row.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss–Hermite rule needs at least one node");
        let mut d = alloc::vec![0.0; n];
        let mut e: Vec<f64> = (1..=n).map(|k| if k < n { math::sqrt(k as f64) } else { 0.0 }).collect();
        let mut q = alloc::vec![0.0; n];
        q[0] = 1.0;
        for l in 0..n {
            let mut iter = 0;
            loop {
                let mut m = l;
                while m + 1 < n {
                    let dd = math::abs(d[m]) + math::abs(d[m + 1]);
                    if math::abs(e[m]) <= f64::EPSILON * dd {
                        break;
                    }
                    m += 1;
                }
                if m == l {
                    break;
                }
                iter += 1;
                assert!(iter <= 200, "tridiagonal QL failed to converge");
                let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
                let mut r = math::hypot(g, 1.0);
                g = d[m] - d[l] + e[l] / (g + if g >= 0.0 { r } else { -r });
                let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
                let mut deflated = false;
                let mut i = m;
                while i > l {
                    i -= 1;
                    let f = s * e[i];
                    let b = c * e[i];
                    r = math::hypot(f, g);
                    e[i + 1] = r;
                    if r == 0.0 {
                        d[i + 1] -= p;
                        e[m] = 0.0;
                        deflated = true;
                        break;
                    }
                    s = f / r;
                    c = g / r;
                    g = d[i + 1] - p;
                    r = (d[i] - g) * s + 2.0 * c * b;
                    p = s * r;
                    d[i + 1] = g + p;
                    g = c * r - b;
                    let f = q[i + 1];
                    q[i + 1] = s * q[i] + c * f;
                    q[i] = c * q[i] - s * f;
                }
                if deflated {
                    continue;
                }
                d[l] -= p;
                e[l] = g;
                e[m] = 0.0;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        let mut nodes: Vec<f64> = order.iter().map(|&k| d[k]).collect();
        let mut probs: Vec<f64> = order.iter().map(|&k| q[k] * q[k]).collect();
        // the rule is exactly symmetric; remove rounding asymmetry
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let z = 0.5 * (nodes[j] - nodes[i]);
            nodes[i] = -z;
            nodes[j] = z;
            let p = 0.5 * (probs[i] + probs[j]);
            probs[i] = p;
            probs[j] = p;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self { nodes, probs }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `E[f(Z)]`, `Z ~ N(0, 1)`.
    pub fn expect1(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.probs)
            .map(|(z, p)| p * f(*z))
            .sum()
    }

    /// `E[h(u, v)]` for `(u, v) ~ N(0, cov)`.
    ///
    /// Nearly comonotone pairs (`|ρ| > 1 − 1e-10`) collapse to the exact
    /// one-dimensional integral along `v = ±(s₂/s₁) u`.
    pub fn expect2(&self, cov: [[f64; 2]; 2], h: impl Fn(f64, f64) -> f64) -> Result<f64> {
        let [[a, b], [c, d]] = cov;
        if !(a.is_finite() && b.is_finite() && c.is_finite() && d.is_finite()) {
            return Err(Error::NonFinite {
                what: "covariance",
            });
        }
        let scale = a.abs().max(d.abs()).max(1e-300);
        if a < -RHO_CLAMP * scale || d < -RHO_CLAMP * scale {
            return Err(Error::NotPsd {
                detail: alloc::format!("negative variance in {:?}", cov),
            });
        }
        let s1 = math::sqrt(a.max(0.0));
        let s2 = math::sqrt(d.max(0.0));
        if s1 == 0.0 || s2 == 0.0 {
            return Ok(self.expect1(|z| h(s1 * z, s2 * z)));
        }
        let off = 0.5 * (b + c);
        let mut rho = off / (s1 * s2);
        if math::abs(rho) > 1.0 + RHO_CLAMP {
            return Err(Error::InvalidCorrelation { rho });
        }
        rho = rho.clamp(-1.0, 1.0);
        if math::abs(rho) > COMONOTONE_RHO {
            let sgn = if rho > 0.0 { 1.0 } else { -1.0 };
            return Ok(self.expect1(|z| h(s1 * z, sgn * s2 * z)));
        }
        let l = cholesky_2x2([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])?;
        let mut total = 0.0;
        for (zi, pi) in self.nodes.iter().zip(&self.probs) {
            let u = l[0][0] * zi;
            let base = l[1][0] * zi;
            let mut inner = 0.0;
            for (zj, pj) in self.nodes.iter().zip(&self.probs) {
                inner += pj * h(u, base + l[1][1] * zj);
            }
            total += pi * inner;
        }
        Ok(total)
    }
}

/// `E[f(u) g(v)]` for `(u, v) ~ N(0, cov)` on a 60-point tensor rule.
pub fn gauss2d_expect(
    cov: [[f64; 2]; 2],
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
) -> Result<f64> {
    GaussHermite::new(60).expect2(cov, |u, v| f(u) * g(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianRng;

    fn softplus(x: f64) -> f64 {
        if x > 30.0 {
            x
        } else {
            x.exp().ln_1p()
        }
    }

    #[test]
    fn moments_of_standard_normal() {
        for n in [20, 60, 90, 200, 400] {
            let gh = GaussHermite::new(n);
            assert!((gh.expect1(|_| 1.0) - 1.0).abs() < 1e-13, "n={n}");
            assert!(gh.expect1(|z| z).abs() < 1e-13, "n={n}");
            assert!((gh.expect1(|z| z * z) - 1.0).abs() < 1e-12, "n={n}");
            assert!((gh.expect1(|z| z.powi(4)) - 3.0).abs() < 1e-11, "n={n}");
            assert!((gh.expect1(|z| z.powi(6)) - 15.0).abs() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn nodes_are_sorted_and_symmetric() {
        let gh = GaussHermite::new(61);
        let z = gh.nodes();
        assert!(z.windows(2).all(|w| w[0] < w[1]));
        for i in 0..z.len() {
            assert!((z[i] + z[z.len() - 1 - i]).abs() < 1e-12);
        }
        assert!(z[30].abs() < 1e-14);
    }

    #[test]
    fn bivariate_identity_recovers_correlation() {
        for rho in [-0.99, -0.5, 0.0, 0.3, 0.9, 1.0 - 1e-11, 1.0] {
            let e = gauss2d_expect([[1.0, rho], [rho, 1.0]], |u| u, |v| v).unwrap();
            // past the comonotone cut the pair is integrated as ρ = ±1
            let slack: f64 = if rho.abs() > COMONOTONE_RHO { 1.0 - rho.abs() } else { 0.0 };
            assert!((e - rho).abs() < 1e-12 + slack, "rho={rho}: {e}");
        }
    }

    #[test]
    fn bivariate_independence_factorizes() {
        let gh = GaussHermite::new(60);
        let m1 = gh.expect1(softplus);
        let e = gauss2d_expect([[1.0, 0.0], [0.0, 1.0]], softplus, softplus).unwrap();
        assert!((e - m1 * m1).abs() < 1e-12);
    }

    #[test]
    fn bivariate_softplus_matches_monte_carlo() {
        let rho: f64 = 0.5;
        let e = gauss2d_expect([[1.0, rho], [rho, 1.0]], softplus, softplus).unwrap();
        let mut rng = GaussianRng::new(11);
        let n = 10_000_000;
        let mut sum = 0.0;
        let c = (1.0 - rho * rho).sqrt();
        for _ in 0..n {
            let z1 = rng.normal();
            let z2 = rng.normal();
            sum += softplus(z1) * softplus(rho * z1 + c * z2);
        }
        let mc = sum / n as f64;
        assert!(((e - mc) / e).abs() < 5e-4, "quadrature {e} vs mc {mc}");
    }

    #[test]
    fn correlation_slightly_past_one_is_clamped() {
        let r = 1.0 + 5e-13;
        let e = gauss2d_expect([[1.0, r], [r, 1.0]], |u| u, |v| v).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let bad = 1.0 + 1e-6;
        assert!(matches!(
            gauss2d_expect([[1.0, bad], [bad, 1.0]], |u| u, |v| v),
            Err(Error::InvalidCorrelation { .. })
        ));
    }

    #[test]
    fn scaled_covariance() {
        // E[u v] = cov, E[u²] = a
        let cov = [[2.0, -0.6], [-0.6, 0.5]];
        let e = gauss2d_expect(cov, |u| u, |v| v).unwrap();
        assert!((e + 0.6).abs() < 1e-12);
        let e = gauss2d_expect(cov, |u| u * u, |_| 1.0).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
    }
}
