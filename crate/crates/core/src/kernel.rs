//! Empirical tangent kernels: the per-layer Gram matrices and their sum, the
//! explicit third-order kernel for the output-layer Gram matrix, the
//! finite-difference consistency check between the two, and frozen-kernel
//! regression.

use alloc::format;
use alloc::vec::Vec;

use crate::dynamics::{backprop, sample_grads, SampleGrad};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vector, EIG_TOL};
use crate::math;
use crate::model::{Dataset, NetworkConfig, Params};

/// Relative asymmetry tolerated before a Gram matrix is symmetrized.
pub const GRAM_SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    EmpiricalK2,
    /// `G^[l]`, `1 ≤ l ≤ L + 1`.
    Layer(usize),
    Limit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub kind: KernelKind,
    pub matrix: Matrix,
}

impl GramMatrix {
    /// Checks near-symmetry and stores `(A + Aᵀ)/2`.
    pub fn new(kind: KernelKind, matrix: Matrix) -> Result<Self> {
        let asym = matrix.max_asymmetry();
        if asym > GRAM_SYMMETRY_TOL * matrix.max_abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Asymmetric {
                max_asymmetry: asym,
            });
        }
        Ok(Self {
            kind,
            matrix: matrix.symmetrized(),
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn trace(&self) -> f64 {
        (0..self.n()).map(|i| self.get(i, i)).sum()
    }

    pub fn lambda_min(&self) -> Result<f64> {
        self.matrix.sym_eig_min(EIG_TOL)
    }

    /// Errors unless `λ_min ≥ −1e-8 · trace / n`.
    pub fn check_psd(&self) -> Result<f64> {
        let lam = self.lambda_min()?;
        let floor = -1e-8 * self.trace().abs() / self.n() as f64;
        if lam < floor {
            return Err(Error::NotPsd {
                detail: format!("{:?} has lambda_min {lam}", self.kind),
            });
        }
        Ok(lam)
    }

    /// `max |self − other|`
    pub fn max_abs_diff(&self, other: &GramMatrix) -> f64 {
        self.matrix.sub(&other.matrix).max_abs()
    }
}

fn gram(n: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = f(i, j);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

/// `G^[l]` from per-sample gradient factors: for `l ≤ L`,
/// `⟨v_α, v_β⟩ ⟨x^[l−1]_α, x^[l−1]_β⟩`; for `l = L + 1`, `⟨x^[L]_α, x^[L]_β⟩`.
pub fn layer_kernel_from_grads(grads: &[SampleGrad], l: usize) -> Result<GramMatrix> {
    let depth = grads.first().map_or(0, |g| g.cache.depth());
    if l == 0 || l > depth + 1 {
        return Err(Error::LayerOutOfRange {
            layer: l,
            max: depth + 1,
        });
    }
    let n = grads.len();
    let m = if l == depth + 1 {
        gram(n, |i, j| dot(grads[i].cache.x(depth), grads[j].cache.x(depth)))
    } else {
        gram(n, |i, j| {
            dot(&grads[i].v[l - 1], &grads[j].v[l - 1])
                * dot(grads[i].cache.x(l - 1), grads[j].cache.x(l - 1))
        })
    };
    GramMatrix::new(KernelKind::Layer(l), m)
}

/// `G^[l]` for the dataset inputs under `params`.
pub fn layer_kernel(config: &NetworkConfig, params: &Params, dataset: &Dataset, l: usize) -> Result<GramMatrix> {
    if l == 0 || l > config.depth + 1 {
        return Err(Error::LayerOutOfRange {
            layer: l,
            max: config.depth + 1,
        });
    }
    if l == config.depth + 1 {
        return output_gram(config, params, dataset);
    }
    layer_kernel_from_grads(&sample_grads(config, params, dataset)?, l)
}

/// `G^[L+1]`, which needs only forward passes.
pub fn output_gram(config: &NetworkConfig, params: &Params, dataset: &Dataset) -> Result<GramMatrix> {
    let outs = dataset
        .inputs
        .iter()
        .map(|x| Ok(crate::model::forward(config, params, x)?.x_layers.pop().expect("output layer")))
        .collect::<Result<Vec<Vector>>>()?;
    output_gram_from_layers(&outs, config.depth)
}

/// `⟨x^[L]_α, x^[L]_β⟩` from precomputed output layers.
pub fn output_gram_from_layers(outputs: &[Vector], depth: usize) -> Result<GramMatrix> {
    let n = outputs.len();
    GramMatrix::new(
        KernelKind::Layer(depth + 1),
        gram(n, |i, j| dot(&outputs[i], &outputs[j])),
    )
}

/// The empirical NTK at one time, optionally with its per-layer split.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSnapshot {
    pub t: f64,
    pub k2: GramMatrix,
    pub per_layer: Option<Vec<GramMatrix>>,
    pub lambda_min: f64,
}

pub fn snapshot_from_grads(t: f64, grads: &[SampleGrad], keep_layers: bool) -> Result<KernelSnapshot> {
    let depth = grads.first().map_or(0, |g| g.cache.depth());
    let n = grads.len();
    let layers = (1..=depth + 1)
        .map(|l| layer_kernel_from_grads(grads, l))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = Matrix::zeros(n, n);
    for g in &layers {
        sum.axpy(1.0, &g.matrix);
    }
    let k2 = GramMatrix::new(KernelKind::EmpiricalK2, sum)?;
    let lambda_min = k2.check_psd()?;
    Ok(KernelSnapshot {
        t,
        k2,
        per_layer: keep_layers.then_some(layers),
        lambda_min,
    })
}

/// `K^(2) = Σ_{l=1}^{L+1} G^[l]` with its smallest eigenvalue.
pub fn empirical_ntk(config: &NetworkConfig, params: &Params, dataset: &Dataset) -> Result<KernelSnapshot> {
    snapshot_from_grads(0.0, &sample_grads(config, params, dataset)?, true)
}

/// Dense `n × n × n` tensor, symmetric in its first two indices.
#[derive(Debug, Clone, PartialEq)]
pub struct G3Tensor {
    pub n: usize,
    pub data: Vec<f64>,
}

impl G3Tensor {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: alloc::vec![0.0; n * n * n],
        }
    }

    #[inline]
    pub fn get(&self, a1: usize, a2: usize, b: usize) -> f64 {
        self.data[(a1 * self.n + a2) * self.n + b]
    }

    #[inline]
    fn add(&mut self, a1: usize, a2: usize, b: usize, v: f64) {
        self.data[(a1 * self.n + a2) * self.n + b] += v;
    }

    pub fn max_abs(&self) -> f64 {
        crate::linalg::vector_inf_norm(&self.data)
    }

    /// `(1/n) Σ_β G3[α1, α2, β] r_β`
    pub fn contract(&self, residuals: &[f64]) -> Matrix {
        let n = self.n;
        Matrix::from_fn(n, n, |a1, a2| {
            (0..n).map(|b| self.get(a1, a2, b) * residuals[b]).sum::<f64>() / n as f64
        })
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a1 in 0..self.n {
            for a2 in 0..self.n {
                for b in 0..self.n {
                    worst = worst.max(math::abs(self.get(a1, a2, b) - self.get(a2, a1, b)));
                }
            }
        }
        worst
    }
}

/// Contribution of each layer `k = 1..L` to the third-order kernel of
/// `G^[L+1]`:
///
/// `T_k(α1, α2, β) = ⟨s_k σ'_k(α1) ⊙ (E^[(k+1):L]_{α1})ᵀ x^[L]_{α2}, v_k(β)⟩ · ⟨x^[k−1]_{α1}, x^[k−1]_β⟩`
///
/// with `s_1 = √(c_σ/m)`, `s_k = c_res/(L√m)` otherwise, and the group tensor
/// `T_k(α1, α2, β) + T_k(α2, α1, β)`.
pub fn g3_groups(config: &NetworkConfig, params: &Params, grads: &[SampleGrad]) -> Vec<G3Tensor> {
    let n = grads.len();
    let depth = config.depth;
    let mut groups: Vec<G3Tensor> = (0..depth).map(|_| G3Tensor::zeros(n)).collect();
    for a1 in 0..n {
        let c1 = &grads[a1].cache;
        for a2 in 0..n {
            let h = backprop(config, params, c1, grads[a2].cache.output_layer());
            for k in 1..=depth {
                let s = if k == 1 {
                    config.first_scale()
                } else {
                    config.res_scale()
                };
                let u: Vec<f64> = c1
                    .sprime(k)
                    .iter()
                    .zip(h[k - 1].iter())
                    .map(|(sp, hk)| s * sp * hk)
                    .collect();
                for (b, gb) in grads.iter().enumerate() {
                    let t = dot(&u, &gb.v[k - 1]) * dot(c1.x(k - 1), gb.cache.x(k - 1));
                    groups[k - 1].add(a1, a2, b, t);
                    groups[k - 1].add(a2, a1, b, t);
                }
            }
        }
    }
    groups
}

/// Third-order kernel with `∂_t G^[L+1] = −(1/n) Σ_β G3[·, ·, β] (f_β − y_β)`.
pub fn g3_kernel(config: &NetworkConfig, params: &Params, grads: &[SampleGrad]) -> G3Tensor {
    sum_groups(&g3_groups(config, params, grads), grads.len())
}

pub fn sum_groups(groups: &[G3Tensor], n: usize) -> G3Tensor {
    let mut total = G3Tensor::zeros(n);
    for g in groups {
        for (t, v) in total.data.iter_mut().zip(&g.data) {
            *t += v;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NthResidual {
    /// `max |ΔG/δ + (1/n) Σ_β G3 r_β|`
    pub max_abs: f64,
    /// `max |ΔG/δ|`
    pub drift_rate: f64,
    /// `max_abs / drift_rate`
    pub relative: f64,
}

/// Consistency of a finite-difference kernel derivative with the
/// third-order kernel. `before` and `after` are the kernel at `t − δ/2`
/// and `t + δ/2`; `g3` and `residuals` are taken at `t`.
pub fn nth_residual(
    before: &GramMatrix,
    after: &GramMatrix,
    delta: f64,
    g3: &G3Tensor,
    residuals: &[f64],
) -> Result<NthResidual> {
    if !(delta > 0.0) {
        return Err(Error::NonPositiveStep(delta));
    }
    let n = before.n();
    if after.n() != n || g3.n != n || residuals.len() != n {
        return Err(Error::DimensionMismatch {
            op: "nth_residual",
            left: (n, n),
            right: (after.n(), residuals.len()),
        });
    }
    let mut rate = after.matrix.sub(&before.matrix);
    rate.scale(1.0 / delta);
    let drift_rate = rate.max_abs();
    let mut res = rate;
    res.axpy(1.0, &g3.contract(residuals));
    let max_abs = res.max_abs();
    let relative = if drift_rate > 0.0 {
        max_abs / drift_rate
    } else if max_abs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(NthResidual {
        max_abs,
        drift_rate,
        relative,
    })
}

/// `f(t) − y = exp(−tK/n)(f(0) − y)` through the eigendecomposition of `K`.
pub fn kernel_regression_predict(k: &GramMatrix, r0: &[f64], t: f64, n: usize) -> Result<Vector> {
    if r0.len() != k.n() {
        return Err(Error::DimensionMismatch {
            op: "kernel_regression_predict",
            left: (k.n(), k.n()),
            right: (r0.len(), 1),
        });
    }
    k.check_psd()?;
    if t == 0.0 {
        return Ok(Vector::from_vec(r0.to_vec()));
    }
    let (vals, vecs) = k.matrix.sym_eig(EIG_TOL)?;
    let coeffs = vecs.matvec_t(r0)?;
    let scaled: Vec<f64> = coeffs
        .iter()
        .zip(&vals)
        .map(|(c, lam)| c * math::exp(-t * lam / n as f64))
        .collect();
    vecs.matvec(&scaled)
}
