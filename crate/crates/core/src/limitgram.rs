//! Infinite-width limits of the Gram matrices: the recursion for `K̃^[l]` and
//! `b̃^[l]`, the closed-form `K^[L+1]` and `K^[L]`, the hierarchy
//! `K̃^[l] − b̃^[l] b̃^[l]ᵀ` with its anchor `λ₀`, a Monte-Carlo estimator for
//! the layer kernels that only exist as width limits, and the
//! initialization-concentration measurements.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::dynamics::sample_grads;
use crate::error::{Error, Result};
use crate::kernel::{GramMatrix, KernelKind};
use crate::linalg::{dot, Matrix, Vector, EIG_TOL};
use crate::math;
use crate::model::{forward_layers_at_init, init_params, Activation, Dataset, NetworkConfig};
use crate::quadrature::GaussHermite;

/// Tensor-rule size used for every expectation in the stack.
pub const DEFAULT_NODES: usize = 60;
/// Finer rule used to cross-check [`DEFAULT_NODES`].
pub const CHECK_NODES: usize = 90;
/// Points on `[1/2, 2]` used to bound the Lipschitz constant of `α ↦ E σ(αX)²`.
pub const INTERVAL_GRID: usize = 1501;

/// `E[f(u) g(v)]` for `(u, v) ~ N(0, A)`, together with `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateMoment {
    pub a: [[f64; 2]; 2],
    pub value: f64,
}

impl BivariateMoment {
    pub fn compute(
        gh: &GaussHermite,
        a: [[f64; 2]; 2],
        f: impl Fn(f64) -> f64,
        g: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if !(a[0][0] > 0.0 && a[1][1] > 0.0) {
            return Err(Error::NotPsd {
                detail: format!("non-positive variance in {a:?}"),
            });
        }
        let value = gh.expect2(a, |u, v| f(u) * g(v))?;
        Ok(Self { a, value })
    }

    pub fn correlation(&self) -> f64 {
        0.5 * (self.a[0][1] + self.a[1][0]) / math::sqrt(self.a[0][0] * self.a[1][1])
    }
}

fn block(k: &Matrix, i: usize, j: usize) -> [[f64; 2]; 2] {
    [[k.get(i, i), k.get(i, j)], [k.get(j, i), k.get(j, j)]]
}

fn moment(
    gh: &GaussHermite,
    k: &Matrix,
    layer: usize,
    i: usize,
    j: usize,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
) -> Result<f64> {
    BivariateMoment::compute(gh, block(k, i, j), f, g)
        .map(|b| b.value)
        .map_err(|e| Error::Quadrature {
            layer,
            i,
            j,
            detail: e.to_string(),
        })
}

/// `E σ(u)`, `u ~ N(0, K_ii)`, for every `i`.
fn marginal_means(gh: &GaussHermite, act: Activation, k: &Matrix, layer: usize) -> Result<Vec<f64>> {
    (0..k.rows())
        .map(|i| {
            let var = k.get(i, i);
            if !(var > 0.0) {
                return Err(Error::Quadrature {
                    layer,
                    i,
                    j: i,
                    detail: format!("variance {var}"),
                });
            }
            let s = math::sqrt(var);
            Ok(gh.expect1(|z| act.value(s * z)))
        })
        .collect()
}

fn symmetric(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Matrix> {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = f(i, j)?;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(m)
}

/// One residual step of the recursion, producing layer `layer` from `layer − 1`:
///
/// `K_ij ← K_ij + E[(c/L)(b_i σ(v) + b_j σ(u)) + (c/L)² σ(u)σ(v)]`, `b_i ← b_i + (c/L) E σ(u)`.
fn residual_step(
    gh: &GaussHermite,
    act: Activation,
    c_over_l: f64,
    k: &Matrix,
    b: &[f64],
    layer: usize,
) -> Result<(Matrix, Vector)> {
    let means = marginal_means(gh, act, k, layer)?;
    let next = symmetric(k.rows(), |i, j| {
        let e = moment(gh, k, layer, i, j, |u| act.value(u), |v| act.value(v))?;
        Ok(k.get(i, j) + c_over_l * (b[i] * means[j] + b[j] * means[i]) + c_over_l * c_over_l * e)
    })?;
    let bn: Vec<f64> = b.iter().zip(&means).map(|(bi, mi)| bi + c_over_l * mi).collect();
    Ok((next, Vector::from_vec(bn)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitKernelStack {
    pub activation: Activation,
    pub c_res: f64,
    pub c_sigma: f64,
    pub nodes: usize,
    /// `K̃^[l]`, `l = 0..=L`.
    pub ktilde: Vec<GramMatrix>,
    /// `b̃^[l]`, `l = 1..=L`, stored at index `l − 1`.
    pub btilde: Vec<Vector>,
    /// One more recursion step past `K̃^[L]`.
    pub k_l1: GramMatrix,
    /// `(c_res/L)² K̃^[L−1] ∘ E[σ'(u)σ'(v)]`.
    pub k_l: GramMatrix,
    /// `K̃^[L−1] ∘ E[σ'(u)σ'(v)]`, i.e. `K^[L]` without its `(c_res/L)²`.
    pub k_l_unscaled: Matrix,
    /// `λ_min(K̃^[l] − b̃^[l] b̃^[l]ᵀ)`, `l = 1..=L`.
    pub hierarchy: Vec<f64>,
    pub lambda0: f64,
}

impl LimitKernelStack {
    pub fn depth(&self) -> usize {
        self.ktilde.len() - 1
    }

    pub fn n(&self) -> usize {
        self.ktilde[0].n()
    }

    pub fn ktilde(&self, l: usize) -> &GramMatrix {
        &self.ktilde[l]
    }

    pub fn btilde(&self, l: usize) -> &Vector {
        &self.btilde[l - 1]
    }

    /// `K̃^[l] − b̃^[l] b̃^[l]ᵀ`
    pub fn centred(&self, l: usize) -> Matrix {
        let mut c = self.ktilde[l].matrix.clone();
        let b = self.btilde(l);
        c.rank1_update(-1.0, b, b);
        c
    }

    /// Width limit of `⟨x^[L]_i, x^[L]_j⟩`, the target of the output-layer
    /// Gram matrix `G^[L+1]` at initialization.
    pub fn output_limit(&self) -> &GramMatrix {
        &self.ktilde[self.depth()]
    }

    fn check_config(&self, config: &NetworkConfig) -> Result<()> {
        if config.depth != self.depth()
            || config.activation != self.activation
            || config.c_res != self.c_res
            || config.c_sigma != self.c_sigma
        {
            return Err(Error::InvalidConfig(format!(
                "network (L = {}, {}, c_res = {}, c_sigma = {}) does not match the limit stack \
                 (L = {}, {}, c_res = {}, c_sigma = {})",
                config.depth,
                config.activation.name(),
                config.c_res,
                config.c_sigma,
                self.depth(),
                self.activation.name(),
                self.c_res,
                self.c_sigma
            )));
        }
        Ok(())
    }
}

pub fn build_limit_stack(
    dataset: &Dataset,
    activation: Activation,
    c_res: f64,
    c_sigma: f64,
    depth: usize,
) -> Result<LimitKernelStack> {
    build_limit_stack_with(dataset, activation, c_res, c_sigma, depth, DEFAULT_NODES)
}

pub fn build_limit_stack_with(
    dataset: &Dataset,
    activation: Activation,
    c_res: f64,
    c_sigma: f64,
    depth: usize,
    nodes: usize,
) -> Result<LimitKernelStack> {
    // reuse the configuration checks; width is irrelevant here
    NetworkConfig::with_c_sigma(dataset.d(), 1, depth, c_res, activation, c_sigma)?;
    let gh = GaussHermite::new(nodes);
    let act = activation;
    let n = dataset.n();
    let c_over_l = c_res / depth as f64;

    let k0 = dataset.gram();
    let k1 = symmetric(n, |i, j| {
        Ok(c_sigma * moment(&gh, &k0, 1, i, j, |u| act.value(u), |v| act.value(v))?)
    })?;
    let s = math::sqrt(c_sigma);
    let b1: Vec<f64> = marginal_means(&gh, act, &k0, 1)?.iter().map(|m| s * m).collect();

    let mut kt = Vec::with_capacity(depth + 1);
    kt.push(k0);
    kt.push(k1);
    let mut bt = alloc::vec![Vector::from_vec(b1)];
    for l in 2..=depth + 1 {
        let (k, b) = residual_step(&gh, act, c_over_l, &kt[l - 1], &bt[l - 2], l)?;
        kt.push(k);
        bt.push(b);
    }
    let k_l1 = GramMatrix::new(KernelKind::Limit, kt.pop().expect("L + 2 entries"))?;
    bt.pop();

    let kprev = &kt[depth - 1];
    let k_l_unscaled = symmetric(n, |i, j| {
        Ok(kprev.get(i, j) * moment(&gh, kprev, depth, i, j, |u| act.d1(u), |v| act.d1(v))?)
    })?;
    let mut k_l = k_l_unscaled.clone();
    k_l.scale(c_over_l * c_over_l);
    let k_l = GramMatrix::new(KernelKind::Limit, k_l)?;

    let ktilde = kt
        .into_iter()
        .map(|k| GramMatrix::new(KernelKind::Limit, k))
        .collect::<Result<Vec<_>>>()?;
    for g in &ktilde {
        g.check_psd()?;
    }
    let mut stack = LimitKernelStack {
        activation,
        c_res,
        c_sigma,
        nodes,
        ktilde,
        btilde: bt,
        k_l1,
        k_l,
        k_l_unscaled,
        hierarchy: Vec::new(),
        lambda0: 0.0,
    };
    stack.hierarchy = (1..=depth)
        .map(|l| stack.centred(l).symmetrized().sym_eig_min(EIG_TOL))
        .collect::<Result<Vec<_>>>()?;
    stack.lambda0 = lambda0(&stack)?;
    Ok(stack)
}

/// `λ₀ = λ_min(K̃^[1] − b̃^[1] b̃^[1]ᵀ)`; errors unless strictly positive.
pub fn lambda0(stack: &LimitKernelStack) -> Result<f64> {
    let lam = match stack.hierarchy.first() {
        Some(&l) => l,
        None => stack.centred(1).symmetrized().sym_eig_min(EIG_TOL)?,
    };
    if !(lam > 0.0) {
        return Err(Error::NonPositiveLambda0(lam));
    }
    Ok(lam)
}

/// Constants of the diagonal growth bound
/// `(1 − (l/L) c/√c_σ)² ≤ K̃^[l]_ii ≤ (1 + (l/L) c/√c_σ)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagonalBound {
    /// `C = c_σ · sup_{α ∈ [1/2, 2]} |E σ(αX)² − E σ(X)²| / |α − 1|`, measured on a grid.
    pub big_c: f64,
    /// `c = C c_res² / (2√c_σ) + √(C² c_res⁴ / (4 c_σ) + c_res²)`.
    pub c: f64,
    pub c_sigma: f64,
    pub depth: usize,
}

impl DiagonalBound {
    pub fn new(activation: Activation, c_res: f64, c_sigma: f64, depth: usize) -> Self {
        let gh = GaussHermite::new(DEFAULT_NODES * 2);
        let second = |alpha: f64| gh.expect1(|z| {
            let s = activation.value(alpha * z);
            s * s
        });
        let base = second(1.0);
        let mut sup: f64 = 0.0;
        for k in 0..INTERVAL_GRID {
            let alpha = 0.5 + 1.5 * k as f64 / (INTERVAL_GRID - 1) as f64;
            let gap = math::abs(alpha - 1.0);
            if gap < 1e-9 {
                continue;
            }
            sup = sup.max(math::abs(second(alpha) - base) / gap);
        }
        let big_c = c_sigma * sup;
        let r2 = c_res * c_res;
        let sc = math::sqrt(c_sigma);
        let c = big_c * r2 / (2.0 * sc) + math::sqrt(big_c * big_c * r2 * r2 / (4.0 * c_sigma) + r2);
        Self {
            big_c,
            c,
            c_sigma,
            depth,
        }
    }

    pub fn interval(&self, l: usize) -> (f64, f64) {
        let step = l as f64 / self.depth as f64 * self.c / math::sqrt(self.c_sigma);
        let lo = (1.0 - step).max(0.0);
        (lo * lo, (1.0 + step) * (1.0 + step))
    }
}

/// Monte-Carlo estimate of a layer kernel defined only as a width limit.
/// An estimate, with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McKernel {
    pub layer: usize,
    pub m_probe: usize,
    pub replicates: usize,
    pub mean: GramMatrix,
    pub stderr: Matrix,
}

impl McKernel {
    /// Aggregates replicate matrices in the given order.
    pub fn from_replicates(layer: usize, m_probe: usize, reps: &[Matrix]) -> Result<Self> {
        let r = reps.len();
        if r < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 replicates, got {r}")));
        }
        let (rows, cols) = reps[0].shape();
        let mut mean = Matrix::zeros(rows, cols);
        for m in reps {
            mean.axpy(1.0 / r as f64, m);
        }
        let stderr = Matrix::from_fn(rows, cols, |i, j| {
            let mu = mean.get(i, j);
            let ss: f64 = reps.iter().map(|m| (m.get(i, j) - mu) * (m.get(i, j) - mu)).sum();
            math::sqrt(ss / (r - 1) as f64 / r as f64)
        });
        Ok(Self {
            layer,
            m_probe,
            replicates: r,
            mean: GramMatrix::new(KernelKind::Limit, mean)?,
            stderr,
        })
    }

    /// `max_ij |mean − target| / stderr`
    pub fn max_z(&self, target: &Matrix) -> f64 {
        let n = self.stderr.rows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = math::abs(self.mean.get(i, j) - target.get(i, j));
                let se = self.stderr.get(i, j);
                worst = worst.max(if se > 0.0 {
                    d / se
                } else if d == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                });
            }
        }
        worst
    }
}

/// One replicate of the layer-`l` estimator at width `config.m`:
/// `pref_ij · (1/m) ⟨σ'_l(x_i) ⊙ (E^[(l+1):L]_i)ᵀ a, σ'_l(x_j) ⊙ (E^[(l+1):L]_j)ᵀ a⟩`,
/// with `pref = c_σ K̃^[0]` for `l = 1` and `(c_res/L)² K̃^[l−1]` otherwise.
pub fn mc_replicate(
    dataset: &Dataset,
    config: &NetworkConfig,
    stack: &LimitKernelStack,
    l: usize,
    seed: u64,
) -> Result<Matrix> {
    stack.check_config(config)?;
    if l == 0 || l > config.depth {
        return Err(Error::LayerOutOfRange {
            layer: l,
            max: config.depth,
        });
    }
    let params = init_params(config, seed);
    let grads = sample_grads(config, &params, dataset)?;
    let m = config.m as f64;
    let (scale, pref) = if l == 1 {
        (config.first_scale(), config.c_sigma)
    } else {
        let c = config.c_res / config.depth as f64;
        (config.res_scale(), c * c)
    };
    // v_l = scale · σ'_l ⊙ g_l
    let inv = 1.0 / (scale * scale * m);
    let kprev = &stack.ktilde(l - 1).matrix;
    symmetric(dataset.n(), |i, j| {
        Ok(pref * kprev.get(i, j) * inv * dot(&grads[i].v[l - 1], &grads[j].v[l - 1]))
    })
}

/// Replicates use seeds `seed, seed + 1, …`.
pub fn mc_layer_kernel(
    dataset: &Dataset,
    config: &NetworkConfig,
    stack: &LimitKernelStack,
    l: usize,
    m_probe: usize,
    replicates: usize,
    seed: u64,
) -> Result<McKernel> {
    if m_probe < 256 || replicates < 8 {
        return Err(Error::InvalidConfig(format!(
            "Monte-Carlo kernel needs m_probe ≥ 256 and ≥ 8 replicates, got {m_probe} and {replicates}"
        )));
    }
    let mut cfg = config.clone();
    cfg.m = m_probe;
    let reps = (0..replicates as u64)
        .map(|r| mc_replicate(dataset, &cfg, stack, l, seed.wrapping_add(r)))
        .collect::<Result<Vec<_>>>()?;
    McKernel::from_replicates(l, m_probe, &reps)
}

/// Initialization measurements for one `(m, seed)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationRow {
    pub m: usize,
    pub seed: u64,
    /// `max |⟨x^[1]_i, x^[1]_j⟩ − K̃^[1]_ij|`
    pub gap_first: f64,
    /// `max |G^[L+1](0) − K̃^[L]|`, with `G^[L+1]_ij = ⟨x^[L]_i, x^[L]_j⟩`.
    pub gap_output: f64,
    /// `max |G^[L+1](0) − K^[L+1]|` against the one-step-further recursion.
    pub gap_output_shifted: f64,
    pub lambda_min_output: f64,
}

pub fn concentration_row(
    dataset: &Dataset,
    config: &NetworkConfig,
    stack: &LimitKernelStack,
    seed: u64,
) -> Result<ConcentrationRow> {
    stack.check_config(config)?;
    let layers = forward_layers_at_init(config, seed, &dataset.inputs)?;
    let n = dataset.n();
    let gram = |xs: &[Vector]| Matrix::from_fn(n, n, |i, j| dot(&xs[i], &xs[j]));
    let g1 = gram(&layers[0]);
    let gl = GramMatrix::new(KernelKind::Layer(config.depth + 1), gram(&layers[config.depth - 1]))?;
    Ok(ConcentrationRow {
        m: config.m,
        seed,
        gap_first: g1.sub(&stack.ktilde(1).matrix).max_abs(),
        gap_output: gl.max_abs_diff(stack.output_limit()),
        gap_output_shifted: gl.max_abs_diff(&stack.k_l1),
        lambda_min_output: gl.lambda_min()?,
    })
}

/// Per-width summary over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationSummary {
    pub m: usize,
    pub seeds: usize,
    pub max_gap_output: f64,
    pub mean_gap_output: f64,
    pub median_gap_output: f64,
    pub max_gap_first: f64,
    pub median_gap_output_shifted: f64,
    pub min_lambda_output: f64,
    pub median_lambda_output: f64,
    /// Seeds with `λ_min(G^[L+1](0)) ≥ (3/4) λ₀`.
    pub lambda_ok: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub lambda0: f64,
    pub rows: Vec<ConcentrationRow>,
    pub summaries: Vec<ConcentrationSummary>,
    /// Log-log slope of the mean output gap against `m`.
    pub gap_slope: f64,
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile; NaN for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

/// Groups rows by width (in order of first appearance) and fits the slope.
pub fn summarize_concentration(rows: Vec<ConcentrationRow>, lambda0: f64) -> ConcentrationReport {
    let mut widths: Vec<usize> = Vec::new();
    for r in &rows {
        if !widths.contains(&r.m) {
            widths.push(r.m);
        }
    }
    let summaries: Vec<ConcentrationSummary> = widths
        .iter()
        .map(|&m| {
            let sel: Vec<&ConcentrationRow> = rows.iter().filter(|r| r.m == m).collect();
            let col = |f: fn(&ConcentrationRow) -> f64| sel.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let out = col(|r| r.gap_output);
            let lam = col(|r| r.lambda_min_output);
            ConcentrationSummary {
                m,
                seeds: sel.len(),
                max_gap_output: out.iter().cloned().fold(0.0, f64::max),
                mean_gap_output: out.iter().sum::<f64>() / out.len() as f64,
                median_gap_output: median(&out),
                max_gap_first: col(|r| r.gap_first).into_iter().fold(0.0, f64::max),
                median_gap_output_shifted: median(&col(|r| r.gap_output_shifted)),
                min_lambda_output: lam.iter().cloned().fold(f64::INFINITY, f64::min),
                median_lambda_output: median(&lam),
                lambda_ok: lam.iter().filter(|&&l| l >= 0.75 * lambda0).count(),
            }
        })
        .collect();
    let xs: Vec<f64> = summaries.iter().map(|s| s.m as f64).collect();
    let ys: Vec<f64> = summaries.iter().map(|s| s.mean_gap_output).collect();
    let gap_slope = if xs.len() >= 2 {
        math::log_log_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    ConcentrationReport {
        lambda0,
        rows,
        summaries,
        gap_slope,
    }
}

/// Runs every `(m, seed)` cell in order, `m` outer.
pub fn init_concentration(
    dataset: &Dataset,
    config: &NetworkConfig,
    stack: &LimitKernelStack,
    m_list: &[usize],
    seeds: &[u64],
) -> Result<ConcentrationReport> {
    let mut rows = Vec::with_capacity(m_list.len() * seeds.len());
    for &m in m_list {
        let mut cfg = config.clone();
        cfg.m = m;
        for &s in seeds {
            rows.push(concentration_row(dataset, &cfg, stack, s)?);
        }
    }
    Ok(summarize_concentration(rows, stack.lambda0))
}

/// Maximum entrywise difference between two stacks over every `K̃^[l]`,
/// `b̃^[l]`, `K^[L+1]` and `K^[L]`.
pub fn stack_difference(a: &LimitKernelStack, b: &LimitKernelStack) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.ktilde.iter().zip(&b.ktilde) {
        worst = worst.max(x.max_abs_diff(y));
    }
    for (x, y) in a.btilde.iter().zip(&b.btilde) {
        for (u, v) in x.iter().zip(y.iter()) {
            worst = worst.max(math::abs(u - v));
        }
    }
    worst
        .max(a.k_l1.max_abs_diff(&b.k_l1))
        .max(a.k_l.max_abs_diff(&b.k_l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::compute_c_sigma;

    fn stack_for(n: usize, depth: usize, seed: u64) -> (Dataset, LimitKernelStack) {
        let ds = Dataset::generate(n, 4, seed).unwrap();
        let cs = compute_c_sigma(Activation::Softplus).unwrap();
        let st = build_limit_stack(&ds, Activation::Softplus, 0.5, cs, depth).unwrap();
        (ds, st)
    }

    #[test]
    fn first_layer_diagonal_is_one() {
        let (_, st) = stack_for(8, 4, 1);
        for i in 0..8 {
            assert!((st.ktilde(1).get(i, i) - 1.0).abs() <= 1e-8);
            assert!((st.ktilde(0).get(i, i) - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn diagonals_agree_within_each_layer() {
        let (_, st) = stack_for(8, 6, 2);
        for l in 0..=6 {
            let k = st.ktilde(l);
            for i in 1..8 {
                assert!((k.get(i, i) - k.get(0, 0)).abs() <= 1e-10, "layer {l}");
            }
        }
    }

    #[test]
    fn bias_squared_below_diagonal() {
        let (_, st) = stack_for(8, 6, 3);
        for l in 1..=6 {
            for i in 0..8 {
                let b = st.btilde(l)[i];
                assert!(b * b < st.ktilde(l).get(i, i), "l={l} i={i}");
            }
        }
    }

    #[test]
    fn diagonal_growth_bound() {
        for depth in [2, 4, 8] {
            let (_, st) = stack_for(6, depth, 4);
            let bound = DiagonalBound::new(Activation::Softplus, 0.5, st.c_sigma, depth);
            assert!(bound.big_c > 0.0 && bound.c > 0.0);
            for l in 1..=depth {
                let (lo, hi) = bound.interval(l);
                for i in 0..6 {
                    let k = st.ktilde(l).get(i, i);
                    assert!(lo <= k && k <= hi, "L={depth} l={l}: {k} not in [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn hierarchy_increases_and_bounds_output_kernel() {
        for seed in [5, 6, 7] {
            let (_, st) = stack_for(8, 4, seed);
            assert!(st.lambda0 > 0.0);
            assert_eq!(st.lambda0, st.hierarchy[0]);
            for w in st.hierarchy.windows(2) {
                assert!(w[1] > w[0], "{:?}", st.hierarchy);
            }
            assert!(st.k_l1.lambda_min().unwrap() > st.lambda0);
            for l in 2..=4 {
                assert!(st.ktilde(l).lambda_min().unwrap() > st.lambda0);
            }
        }
    }

    #[test]
    fn quadrature_grids_agree() {
        let ds = Dataset::generate(8, 4, 8).unwrap();
        let cs = compute_c_sigma(Activation::Softplus).unwrap();
        let a = build_limit_stack_with(&ds, Activation::Softplus, 0.5, cs, 4, DEFAULT_NODES).unwrap();
        let b = build_limit_stack_with(&ds, Activation::Softplus, 0.5, cs, 4, CHECK_NODES).unwrap();
        assert!(stack_difference(&a, &b) <= 1e-9, "{}", stack_difference(&a, &b));
    }

    #[test]
    fn orthonormal_inputs() {
        let inputs: Vec<Vector> = (0..4)
            .map(|k| Vector::from_vec((0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect()))
            .collect();
        let ds = Dataset::new(inputs, alloc::vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let cs = compute_c_sigma(Activation::Softplus).unwrap();
        let st = build_limit_stack(&ds, Activation::Softplus, 0.5, cs, 3).unwrap();
        assert_eq!(st.ktilde(0).matrix, Matrix::identity(4));
        // independent coordinates: K̃¹ − b̃b̃ᵀ = c_σ Var σ(z) I
        let gh = GaussHermite::new(200);
        let m1 = gh.expect1(|z| Activation::Softplus.value(z));
        let var = 1.0 / cs - m1 * m1;
        assert!((st.lambda0 - cs * var).abs() < 1e-10, "{} vs {}", st.lambda0, cs * var);
    }

    #[test]
    fn nearly_parallel_inputs() {
        let rho: f64 = 1.0 - 1e-4;
        let x1 = Vector::from_vec(alloc::vec![1.0, 0.0, 0.0, 0.0]);
        let x2 = Vector::from_vec(alloc::vec![rho, (1.0 - rho * rho).sqrt(), 0.0, 0.0]);
        let ds = Dataset::new(alloc::vec![x1, x2], alloc::vec![0.0, 1.0]).unwrap();
        let act = Activation::Softplus;
        let cs = compute_c_sigma(act).unwrap();
        let st = build_limit_stack(&ds, act, 0.5, cs, 3).unwrap();
        // Var − Cov = E[(σ(u) − σ(v))²] / 2 ≈ (1 − ρ) E[σ'(z)²]
        let gh = GaussHermite::new(200);
        let oracle = cs * (1.0 - rho) * gh.expect1(|z| act.d1(z) * act.d1(z));
        assert!(st.lambda0 > 0.0);
        assert!(((st.lambda0 - oracle) / oracle).abs() < 1e-3, "{} vs {oracle}", st.lambda0);
    }

    #[test]
    fn output_derivative_kernel_factorizes() {
        let (_, st) = stack_for(6, 5, 9);
        let mut scaled = st.k_l_unscaled.clone();
        scaled.scale(0.01);
        assert!(scaled.sub(&st.k_l.matrix).max_abs() <= 1e-15);
        let kappa = st.k_l_unscaled.sym_eig_min(EIG_TOL).unwrap();
        assert!(kappa > 0.0);
        let lam = st.k_l.lambda_min().unwrap();
        assert!((lam - 0.01 * kappa).abs() <= 1e-12 * kappa);
    }

    #[test]
    fn bivariate_moment_rejects_bad_blocks() {
        let gh = GaussHermite::new(20);
        assert!(BivariateMoment::compute(&gh, [[0.0, 0.0], [0.0, 1.0]], |u| u, |v| v).is_err());
        assert!(BivariateMoment::compute(&gh, [[1.0, 1.5], [1.5, 1.0]], |u| u, |v| v).is_err());
        let b = BivariateMoment::compute(&gh, [[1.0, 0.4], [0.4, 4.0]], |u| u, |v| v).unwrap();
        assert!((b.value - 0.4).abs() < 1e-12);
        assert!((b.correlation() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mc_standard_error_shrinks_with_replicates() {
        let (ds, st) = stack_for(4, 3, 10);
        let cfg = NetworkConfig::with_c_sigma(4, 256, 3, 0.5, Activation::Softplus, st.c_sigma).unwrap();
        let ses: Vec<f64> = [8usize, 32, 128]
            .iter()
            .map(|&r| {
                let k = mc_layer_kernel(&ds, &cfg, &st, 3, 256, r, 100).unwrap();
                let n = 4;
                (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| k.stderr.get(i, j)).sum::<f64>() / 16.0
            })
            .collect();
        let slope = math::log_log_slope(&[8.0, 32.0, 128.0], &ses);
        assert!((-0.75..=-0.25).contains(&slope), "slope {slope}, {ses:?}");
    }

    #[test]
    fn mc_matches_closed_form_at_last_layer() {
        let (ds, st) = stack_for(4, 3, 11);
        let cfg = NetworkConfig::with_c_sigma(4, 256, 3, 0.5, Activation::Softplus, st.c_sigma).unwrap();
        let k = mc_layer_kernel(&ds, &cfg, &st, 3, 512, 32, 7).unwrap();
        assert!(k.max_z(&st.k_l.matrix) <= 4.0, "{}", k.max_z(&st.k_l.matrix));
        assert!(mc_layer_kernel(&ds, &cfg, &st, 3, 128, 32, 7).is_err());
        assert!(mc_layer_kernel(&ds, &cfg, &st, 4, 256, 8, 7).is_err());
    }

    #[test]
    fn concentration_gap_shrinks_with_width() {
        let (ds, st) = stack_for(4, 3, 12);
        let cfg = NetworkConfig::with_c_sigma(4, 64, 3, 0.5, Activation::Softplus, st.c_sigma).unwrap();
        let rep = init_concentration(&ds, &cfg, &st, &[64, 256, 1024], &[1, 2, 3, 4]).unwrap();
        assert_eq!(rep.rows.len(), 12);
        assert_eq!(rep.summaries.len(), 3);
        assert!(rep.gap_slope < -0.2, "{}", rep.gap_slope);
        let bad = NetworkConfig::with_c_sigma(4, 64, 4, 0.5, Activation::Softplus, st.c_sigma).unwrap();
        assert!(concentration_row(&ds, &bad, &st, 0).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(quantile(&[1.0, 2.0], 1.0), 2.0);
        assert!(median(&[]).is_nan());
    }
}
