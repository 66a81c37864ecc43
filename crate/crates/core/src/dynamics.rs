//! Skip-connection matrices, exact parameter gradients, the gradient-flow
//! integrator and the spectral stability diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix, Vector};
use crate::math;
use crate::model::{forward, forward_batch, network_output, Dataset, ForwardCache, NetworkConfig, Params};
use crate::rng::GaussianRng;

pub const SPECTRAL_TOL: f64 = 1e-6;
pub const SPECTRAL_MAX_ITER: usize = 20_000;

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

fn check_layer(config: &NetworkConfig, l: usize) -> Result<()> {
    if l < 2 || l > config.depth {
        return Err(Error::LayerOutOfRange {
            layer: l,
            max: config.depth,
        });
    }
    Ok(())
}

/// `E^[l] = I + (c_res/L) · diag(σ'(z^[l])) · W^[l] / √m`, built by scaling
/// the rows of `W^[l]`.
pub fn skip_matrix(config: &NetworkConfig, params: &Params, cache: &ForwardCache, l: usize) -> Result<Matrix> {
    check_layer(config, l)?;
    let rs = config.res_scale();
    let sp = cache.sprime(l);
    let mut e = params.w[l - 2].clone();
    for i in 0..config.m {
        let c = rs * sp[i];
        e.row_mut(i).iter_mut().for_each(|v| *v *= c);
        let d = e.get(i, i);
        e.set(i, i, d + 1.0);
    }
    Ok(e)
}

/// `E^[l_to] ⋯ E^[l_from]`; the identity when the range is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipProduct {
    pub l_from: usize,
    pub l_to: usize,
    pub matrix: Matrix,
}

pub fn skip_product(
    config: &NetworkConfig,
    params: &Params,
    cache: &ForwardCache,
    l_from: usize,
    l_to: usize,
) -> Result<SkipProduct> {
    let mut matrix = Matrix::identity(config.m);
    if l_from <= l_to {
        check_layer(config, l_from)?;
        check_layer(config, l_to)?;
        for l in l_from..=l_to {
            matrix = skip_matrix(config, params, cache, l)?.matmul(&matrix)?;
        }
    }
    Ok(SkipProduct {
        l_from,
        l_to,
        matrix,
    })
}

/// `(E^[l])ᵀ g = g + (c_res/(L√m)) W^[l]ᵀ (σ'(z^[l]) ⊙ g)`
pub fn apply_skip_t(config: &NetworkConfig, params: &Params, cache: &ForwardCache, l: usize, g: &[f64]) -> Vector {
    let sp = cache.sprime(l);
    let u: Vec<f64> = g.iter().zip(sp.iter()).map(|(a, b)| a * b).collect();
    let mut out = Vector::from(g.to_vec());
    params.w[l - 2].matvec_t_acc(config.res_scale(), &u, &mut out);
    out
}

/// Backward accumulation of `(E^[(l+1):L])ᵀ top` for `l = 1..L`, returned at
/// index `l − 1` (so the last entry is `top` itself).
pub fn backprop(config: &NetworkConfig, params: &Params, cache: &ForwardCache, top: &[f64]) -> Vec<Vector> {
    let depth = config.depth;
    let mut out: Vec<Vector> = Vec::with_capacity(depth);
    out.push(Vector::from(top.to_vec()));
    for l in (2..=depth).rev() {
        let next = apply_skip_t(config, params, cache, l, out.last().expect("nonempty"));
        out.push(next);
    }
    out.reverse();
    out
}

/// Parameter gradient of `f(x, θ)`; mirrors [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradTheta {
    pub gw1: Matrix,
    pub gw: Vec<Matrix>,
    pub ga: Vector,
}

impl GradTheta {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Self {
            gw1: Matrix::zeros(config.m, config.d),
            gw: (1..config.depth)
                .map(|_| Matrix::zeros(config.m, config.m))
                .collect(),
            ga: Vector::zeros(config.m),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.gw.len() + 2
    }

    pub fn block(&self, k: usize) -> &[f64] {
        match k {
            0 => self.gw1.as_slice(),
            k if k <= self.gw.len() => self.gw[k - 1].as_slice(),
            _ => &self.ga,
        }
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [f64] {
        let nw = self.gw.len();
        match k {
            0 => self.gw1.as_mut_slice(),
            k if k <= nw => self.gw[k - 1].as_mut_slice(),
            _ => &mut self.ga,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..self.num_blocks() {
            out.extend_from_slice(self.block(k));
        }
        out
    }

    pub fn dot(&self, other: &GradTheta) -> f64 {
        (0..self.num_blocks())
            .map(|k| dot(self.block(k), other.block(k)))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.dot(self))
    }

    pub fn set_zero(&mut self) {
        for k in 0..self.num_blocks() {
            self.block_mut(k).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &GradTheta) {
        for k in 0..self.num_blocks() {
            axpy(alpha, other.block(k), self.block_mut(k));
        }
    }
}

impl Params {
    /// `θ += alpha · g`
    pub fn add_scaled(&mut self, alpha: f64, g: &GradTheta) {
        for k in 0..self.num_blocks() {
            axpy(alpha, g.block(k), self.block_mut(k));
        }
    }
}

/// One sample's forward pass together with the rank-one factors of its
/// gradient: block `l` of `∇θ f` is `v[l−1] ⊗ x^[l−1]`.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub cache: ForwardCache,
    /// `(E^[(l+1):L])ᵀ a`, index `l − 1`.
    pub g: Vec<Vector>,
    /// `scale_l · σ'(z^[l]) ⊙ g_l`, index `l − 1`.
    pub v: Vec<Vector>,
    pub f: f64,
}

impl SampleGrad {
    pub fn from_cache(config: &NetworkConfig, params: &Params, cache: ForwardCache) -> Self {
        let g = backprop(config, params, &cache, &params.a);
        Self::from_parts(config, params, cache, g)
    }

    fn from_parts(config: &NetworkConfig, params: &Params, cache: ForwardCache, g: Vec<Vector>) -> Self {
        let v = (1..=config.depth)
            .map(|l| {
                let s = if l == 1 {
                    config.first_scale()
                } else {
                    config.res_scale()
                };
                cache
                    .sprime(l)
                    .iter()
                    .zip(g[l - 1].iter())
                    .map(|(sp, gi)| s * sp * gi)
                    .collect::<Vec<_>>()
                    .into()
            })
            .collect();
        let f = network_output(&cache, params);
        Self { cache, g, v, f }
    }

    /// `out += alpha · ∇θ f`
    pub fn accumulate_into(&self, alpha: f64, out: &mut GradTheta) {
        out.gw1.rank1_update(alpha, &self.v[0], self.cache.x(0));
        for (k, gw) in out.gw.iter_mut().enumerate() {
            let l = k + 2;
            gw.rank1_update(alpha, &self.v[l - 1], self.cache.x(l - 1));
        }
        axpy(alpha, self.cache.output_layer(), &mut out.ga);
    }

    pub fn to_dense(&self, config: &NetworkConfig) -> GradTheta {
        let mut g = GradTheta::zeros(config);
        self.accumulate_into(1.0, &mut g);
        g
    }
}

/// `out += Σ_s alphas[s] ∇θ f_s`, reading each gradient block once. Equal
/// bit for bit to calling [`SampleGrad::accumulate_into`] in order.
pub fn accumulate_batch(grads: &[SampleGrad], alphas: &[f64], out: &mut GradTheta) {
    let xs = |l: usize| grads.iter().map(|g| &g.cache.x(l)[..]).collect::<Vec<&[f64]>>();
    let vs = |l: usize| grads.iter().map(|g| &g.v[l - 1][..]).collect::<Vec<&[f64]>>();
    out.gw1.rank1_update_batch(alphas, &vs(1), &xs(0));
    for (k, gw) in out.gw.iter_mut().enumerate() {
        let l = k + 2;
        gw.rank1_update_batch(alphas, &vs(l), &xs(l - 1));
    }
    for (g, a) in grads.iter().zip(alphas) {
        axpy(*a, g.cache.output_layer(), &mut out.ga);
    }
}

pub fn sample_grad(config: &NetworkConfig, params: &Params, x: &[f64]) -> Result<SampleGrad> {
    let cache = forward(config, params, x)?;
    Ok(SampleGrad::from_cache(config, params, cache))
}

/// `∇θ f(x, θ)` for the sample cached in `cache`.
pub fn grad_theta_f(config: &NetworkConfig, params: &Params, cache: &ForwardCache) -> GradTheta {
    SampleGrad::from_cache(config, params, cache.clone()).to_dense(config)
}

/// `R_S = (1/2n) Σ (f_β − y_β)²`
pub fn loss_from_residuals(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r * r).sum::<f64>() / (2.0 * residuals.len() as f64)
}

pub fn residuals(config: &NetworkConfig, params: &Params, dataset: &Dataset) -> Result<Vec<f64>> {
    Ok(forward_batch(config, params, &dataset.inputs)?
        .iter()
        .zip(&dataset.labels)
        .map(|(c, y)| network_output(c, params) - y)
        .collect())
}

pub fn loss(config: &NetworkConfig, params: &Params, dataset: &Dataset) -> Result<f64> {
    Ok(loss_from_residuals(&residuals(config, params, dataset)?))
}

/// Per-sample gradients for the whole dataset, in sample order. The forward
/// and backward passes run batched; each result equals [`sample_grad`].
pub fn sample_grads(config: &NetworkConfig, params: &Params, dataset: &Dataset) -> Result<Vec<SampleGrad>> {
    let caches = forward_batch(config, params, &dataset.inputs)?;
    let depth = config.depth;
    // running (E^[(l+1):L])ᵀ a per sample, and every stage of it
    let mut top: Vec<Vector> = caches.iter().map(|_| params.a.clone()).collect();
    let mut layers: Vec<Vec<Vector>> = top.iter().map(|t| alloc::vec![t.clone()]).collect();
    for l in (2..=depth).rev() {
        let us: Vec<Vector> = caches
            .iter()
            .zip(&top)
            .map(|(c, g)| g.iter().zip(c.sprime(l).iter()).map(|(a, b)| a * b).collect::<Vec<_>>().into())
            .collect();
        params.w[l - 2].matvec_t_acc_batch(config.res_scale(), &us, &mut top);
        for (g, t) in layers.iter_mut().zip(&top) {
            g.push(t.clone());
        }
    }
    Ok(caches
        .into_iter()
        .zip(layers)
        .map(|(c, mut g)| {
            g.reverse();
            SampleGrad::from_parts(config, params, c, g)
        })
        .collect())
}

/// `∇R_S` written into `out`; returns the residuals `f_β − y_β`. Samples are
/// summed in index order.
pub fn grad_loss_into(
    config: &NetworkConfig,
    params: &Params,
    dataset: &Dataset,
    out: &mut GradTheta,
) -> Result<Vec<f64>> {
    out.set_zero();
    let n = dataset.n() as f64;
    let grads = sample_grads(config, params, dataset)?;
    let res: Vec<f64> = grads.iter().zip(&dataset.labels).map(|(g, y)| g.f - y).collect();
    let alphas: Vec<f64> = res.iter().map(|r| r / n).collect();
    accumulate_batch(&grads, &alphas, out);
    Ok(res)
}

pub fn grad_loss(config: &NetworkConfig, params: &Params, dataset: &Dataset) -> Result<(GradTheta, Vec<f64>)> {
    let mut g = GradTheta::zeros(config);
    let r = grad_loss_into(config, params, dataset, &mut g)?;
    Ok((g, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk4,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Rk4 => "rk4",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub params: Params,
    pub step: f64,
    pub scheme: Scheme,
}

impl FlowState {
    pub fn new(params: Params, step: f64, scheme: Scheme) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::NonPositiveStep(step));
        }
        Ok(Self {
            t: 0.0,
            params,
            step,
            scheme,
        })
    }
}

/// Loss went up across one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWarning {
    pub t: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: FlowState,
    /// Residuals at the start of the step.
    pub residuals_before: Vec<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub warning: Option<StepWarning>,
}

/// One explicit step of `θ̇ = −∇R_S(θ)` with a signed step `h`; negative `h`
/// integrates backwards. Returns the new parameters and the residuals at the
/// starting point.
pub fn integrate(
    config: &NetworkConfig,
    params: &Params,
    dataset: &Dataset,
    h: f64,
    scheme: Scheme,
) -> Result<(Params, Vec<f64>)> {
    let mut k = GradTheta::zeros(config);
    let r0 = grad_loss_into(config, params, dataset, &mut k)?;
    let mut next = params.clone();
    match scheme {
        Scheme::Euler => next.add_scaled(-h, &k),
        Scheme::Rk4 => {
            let mut acc = k.clone();
            let mut stage = params.clone();
            stage.add_scaled(-0.5 * h, &k);
            grad_loss_into(config, &stage, dataset, &mut k)?;
            acc.axpy(2.0, &k);
            stage.clone_from(params);
            stage.add_scaled(-0.5 * h, &k);
            grad_loss_into(config, &stage, dataset, &mut k)?;
            acc.axpy(2.0, &k);
            stage.clone_from(params);
            stage.add_scaled(-h, &k);
            grad_loss_into(config, &stage, dataset, &mut k)?;
            acc.axpy(1.0, &k);
            next.add_scaled(-h / 6.0, &acc);
        }
    }
    if !next.is_finite() {
        return Err(Error::NonFinite {
            what: "parameters after integration step",
        });
    }
    Ok((next, r0))
}

/// Advances the flow by `state.step`. A loss increase above 1e-12 is
/// reported as a warning, not an error.
pub fn flow_step(state: &FlowState, config: &NetworkConfig, dataset: &Dataset) -> Result<StepOutcome> {
    if !(state.step > 0.0) {
        return Err(Error::NonPositiveStep(state.step));
    }
    let (params, residuals_before) = integrate(config, &state.params, dataset, state.step, state.scheme)?;
    let loss_before = loss_from_residuals(&residuals_before);
    let loss_after = loss(config, &params, dataset)?;
    let warning = if loss_after > loss_before + 1e-12 {
        log::warn!(
            "loss increased from {loss_before} to {loss_after} at t = {} ({} step {})",
            state.t,
            state.scheme.name(),
            state.step
        );
        Some(StepWarning {
            t: state.t,
            loss_before,
            loss_after,
        })
    } else {
        None
    };
    Ok(StepOutcome {
        state: FlowState {
            t: state.t + state.step,
            params,
            step: state.step,
            scheme: state.scheme,
        },
        residuals_before,
        loss_before,
        loss_after,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralDiag {
    /// `max(1, ‖W^[l]‖₂/√m for l ≥ 2, ‖a‖₂/√m)`
    pub xi: f64,
    /// Largest `‖·‖_{2→∞}` over `W^[2..L]` and their transposes.
    pub omega: f64,
}

pub fn spectral_diag(config: &NetworkConfig, params: &Params) -> Result<SpectralDiag> {
    spectral_diag_with(config, params, SPECTRAL_TOL, SPECTRAL_MAX_ITER)
}

pub fn spectral_diag_with(config: &NetworkConfig, params: &Params, tol: f64, max_iter: usize) -> Result<SpectralDiag> {
    let sm = math::sqrt(config.m as f64);
    let mut xi: f64 = 1.0;
    let mut omega: f64 = 0.0;
    for w in &params.w {
        xi = xi.max(w.spectral_norm(tol, max_iter)? / sm);
        omega = omega
            .max(w.two_to_infinity_norm())
            .max(w.transpose().two_to_infinity_norm());
    }
    xi = xi.max(params.a.norm2() / sm);
    Ok(SpectralDiag { xi, omega })
}

/// Worst entry of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_block: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            probes: 0,
            max_rel_error: 0.0,
            worst_block: String::new(),
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        }
    }

    fn record(&mut self, block: String, index: usize, analytic: f64, numeric: f64) {
        self.probes += 1;
        let err = math::abs(analytic - numeric) / (math::abs(analytic) + 1e-12);
        if err > self.max_rel_error || self.worst_block.is_empty() {
            self.max_rel_error = err;
            self.worst_block = block;
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        let probes = self.probes + other.probes;
        if other.max_rel_error > self.max_rel_error || self.worst_block.is_empty() {
            *self = other;
        }
        self.probes = probes;
    }
}

/// Arithmetic used to evaluate the objective inside a finite-difference
/// check. In plain `f64` the rounding error of `f`, divided by `2h`, is of the
/// same order as the 1e-6 relative tolerance; double-double evaluation
/// leaves only the `O(h²)` truncation error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdPrecision {
    F64,
    DoubleDouble,
}

type Objective<'a> = dyn Fn(&Params) -> Result<Dd> + 'a;

/// Central difference of `objective` in coordinate `(k, i)`.
fn central_difference(params: &Params, k: usize, i: usize, h: f64, objective: &Objective<'_>) -> Result<f64> {
    let mut p = params.clone();
    let x0 = p.block(k)[i];
    let xp = x0 + h;
    let xm = x0 - h;
    p.block_mut(k)[i] = xp;
    let fp = objective(&p)?;
    p.block_mut(k)[i] = xm;
    let fm = objective(&p)?;
    Ok(((fp - fm) / (Dd::from(xp) - Dd::from(xm))).to_f64())
}

fn check_against(
    params: &Params,
    analytic: &GradTheta,
    probes_per_block: usize,
    h: f64,
    seed: u64,
    objective: &Objective<'_>,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveStep(h));
    }
    let mut rng = GaussianRng::new(seed);
    let mut report = GradCheckReport::empty();
    for k in 0..params.num_blocks() {
        let len = params.block(k).len();
        for _ in 0..probes_per_block {
            let i = (rng.next_u64() % len as u64) as usize;
            let numeric = central_difference(params, k, i, h, objective)?;
            report.record(params.block_name(k), i, analytic.block(k)[i], numeric);
        }
    }
    Ok(report)
}

/// `f(x, θ)` evaluated in double-double arithmetic.
pub fn network_output_dd(config: &NetworkConfig, params: &Params, x: &[f64]) -> Result<Dd> {
    if x.len() != config.d {
        return Err(Error::DimensionMismatch {
            op: "network_output_dd",
            left: (config.m, config.d),
            right: (x.len(), 1),
        });
    }
    let act = config.activation;
    let s1 = Dd::from(config.first_scale());
    let rs = Dd::from(config.res_scale());
    let mut cur: Vec<Dd> = (0..config.m)
        .map(|i| {
            let z = params.w1.row(i).iter().zip(x).fold(Dd::ZERO, |acc, (w, xj)| acc + Dd::mul_f64(*w, *xj));
            s1 * z.activation(act)
        })
        .collect();
    for w in &params.w {
        let next: Vec<Dd> = (0..config.m)
            .map(|i| {
                let z = w.row(i).iter().zip(&cur).fold(Dd::ZERO, |acc, (wij, xj)| acc + Dd::from(*wij) * *xj);
                cur[i] + rs * z.activation(act)
            })
            .collect();
        cur = next;
    }
    let f = params.a.iter().zip(&cur).fold(Dd::ZERO, |acc, (ai, xi)| acc + Dd::from(*ai) * *xi);
    if !f.to_f64().is_finite() {
        return Err(Error::NonFinite { what: "double-double output" });
    }
    Ok(f)
}

fn output_objective<'a>(config: &'a NetworkConfig, x: &'a [f64], precision: FdPrecision) -> impl Fn(&Params) -> Result<Dd> + 'a {
    move |p: &Params| match precision {
        FdPrecision::F64 => {
            let c = forward(config, p, x)?;
            Ok(Dd::from(network_output(&c, p)))
        }
        FdPrecision::DoubleDouble => network_output_dd(config, p, x),
    }
}

/// Compares `analytic` against central differences of `f(x, θ)` on
/// `probes_per_block` random coordinates of every block.
#[allow(clippy::too_many_arguments)]
pub fn check_output_gradient(
    config: &NetworkConfig,
    params: &Params,
    x: &[f64],
    analytic: &GradTheta,
    probes_per_block: usize,
    h: f64,
    seed: u64,
    precision: FdPrecision,
) -> Result<GradCheckReport> {
    let objective = output_objective(config, x, precision);
    check_against(params, analytic, probes_per_block, h, seed, &objective)
}

/// Checks the listed `(block, index)` coordinates of `analytic` against
/// central differences of `f(x, θ)`.
pub fn check_output_coordinates(
    config: &NetworkConfig,
    params: &Params,
    x: &[f64],
    analytic: &GradTheta,
    coords: &[(usize, usize)],
    h: f64,
    precision: FdPrecision,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveStep(h));
    }
    let objective = output_objective(config, x, precision);
    let mut report = GradCheckReport::empty();
    for &(k, i) in coords {
        if k >= params.num_blocks() || i >= params.block(k).len() {
            return Err(Error::InvalidConfig(format!("no gradient coordinate ({k}, {i})")));
        }
        let numeric = central_difference(params, k, i, h, &objective)?;
        report.record(params.block_name(k), i, analytic.block(k)[i], numeric);
    }
    Ok(report)
}

/// As [`check_output_gradient`], for `R_S` and [`grad_loss`].
#[allow(clippy::too_many_arguments)]
pub fn check_loss_gradient(
    config: &NetworkConfig,
    params: &Params,
    dataset: &Dataset,
    analytic: &GradTheta,
    probes_per_block: usize,
    h: f64,
    seed: u64,
    precision: FdPrecision,
) -> Result<GradCheckReport> {
    let objective = |p: &Params| -> Result<Dd> {
        let mut total = Dd::ZERO;
        for (x, y) in dataset.inputs.iter().zip(&dataset.labels) {
            let f = output_objective(config, x, precision)(p)?;
            let r = f - Dd::from(*y);
            total = total + r * r;
        }
        Ok(total / Dd::from(2.0 * dataset.n() as f64))
    };
    check_against(params, analytic, probes_per_block, h, seed, &objective)
}

impl core::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{} probes, max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            self.probes,
            self.max_rel_error,
            self.worst_block,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_vector, EIG_TOL};
    use crate::model::{init_params, Activation};

    fn cfg(m: usize, depth: usize) -> NetworkConfig {
        NetworkConfig::new(4, m, depth, 0.5, Activation::Softplus).unwrap()
    }

    #[test]
    fn batched_passes_match_single_sample_exactly() {
        let c = cfg(37, 4);
        let p = init_params(&c, 9);
        let ds = Dataset::generate(5, 4, 3).unwrap();
        let batch = sample_grads(&c, &p, &ds).unwrap();
        let mut dense = GradTheta::zeros(&c);
        for (b, x) in batch.iter().zip(&ds.inputs) {
            let single = sample_grad(&c, &p, x).unwrap();
            assert_eq!(b.cache, single.cache);
            assert_eq!(b.g, single.g);
            assert_eq!(b.v, single.v);
            assert_eq!(b.f.to_bits(), single.f.to_bits());
        }
        let n = ds.n() as f64;
        for (b, y) in batch.iter().zip(&ds.labels) {
            b.accumulate_into((b.f - y) / n, &mut dense);
        }
        let (g, _) = grad_loss(&c, &p, &ds).unwrap();
        assert_eq!(g, dense);
    }

    #[test]
    fn skip_matrix_identity_cases() {
        let zc = NetworkConfig::with_c_sigma(4, 8, 3, 0.5, Activation::Zero, 1.0).unwrap();
        let p = init_params(&zc, 0);
        let ds = Dataset::generate(1, 4, 0).unwrap();
        let c = forward(&zc, &p, &ds.inputs[0]).unwrap();
        assert_eq!(skip_matrix(&zc, &p, &c, 2).unwrap(), Matrix::identity(8));

        let mut sc = cfg(8, 3);
        let p = init_params(&sc, 0);
        let c = forward(&sc, &p, &ds.inputs[0]).unwrap();
        sc.c_res = 0.0;
        assert_eq!(skip_matrix(&sc, &p, &c, 3).unwrap(), Matrix::identity(8));
        assert!(matches!(
            skip_matrix(&sc, &p, &c, 1),
            Err(Error::LayerOutOfRange { layer: 1, max: 3 })
        ));
        assert!(skip_matrix(&sc, &p, &c, 4).is_err());
    }

    #[test]
    fn skip_matrix_norm_bound() {
        let c = cfg(128, 3);
        let p = init_params(&c, 4);
        let ds = Dataset::generate(1, 4, 4).unwrap();
        let cache = forward(&c, &p, &ds.inputs[0]).unwrap();
        for l in 2..=3 {
            let e = skip_matrix(&c, &p, &cache, l).unwrap();
            let ne = e.spectral_norm(1e-10, 100_000).unwrap();
            let nw = p.w[l - 2].spectral_norm(1e-10, 100_000).unwrap();
            assert!(ne <= 1.0 + (0.5 / 3.0) * nw / (128f64).sqrt() + 1e-8);
        }
    }

    #[test]
    fn empty_skip_product_is_identity() {
        let c = cfg(8, 4);
        let p = init_params(&c, 1);
        let ds = Dataset::generate(1, 4, 1).unwrap();
        let cache = forward(&c, &p, &ds.inputs[0]).unwrap();
        let sp = skip_product(&c, &p, &cache, 4, 3).unwrap();
        let mut rng = GaussianRng::new(5);
        for _ in 0..10 {
            let v = gaussian_vector(8, &mut rng);
            assert_eq!(sp.matrix.matvec(&v).unwrap(), v);
        }
    }

    #[test]
    fn backprop_matches_dense_products() {
        let c = cfg(12, 4);
        let p = init_params(&c, 2);
        let ds = Dataset::generate(1, 4, 2).unwrap();
        let cache = forward(&c, &p, &ds.inputs[0]).unwrap();
        let g = backprop(&c, &p, &cache, &p.a);
        for l in 1..=4 {
            let prod = skip_product(&c, &p, &cache, l + 1, 4).unwrap();
            let dense = prod.matrix.matvec_t(&p.a).unwrap();
            for (a, b) in dense.iter().zip(g[l - 1].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_weights_kill_weight_gradients() {
        let c = cfg(16, 3);
        let mut p = init_params(&c, 3);
        p.a = Vector::zeros(16);
        let ds = Dataset::generate(1, 4, 3).unwrap();
        let cache = forward(&c, &p, &ds.inputs[0]).unwrap();
        let g = grad_theta_f(&c, &p, &cache);
        assert!(g.gw1.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.gw.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0)));
        assert_eq!(&g.ga, cache.x(3));
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        for (seed, depth) in [(0u64, 3usize), (1, 2), (2, 5)] {
            let c = cfg(16, depth);
            let p = init_params(&c, seed);
            let ds = Dataset::generate(1, 4, seed).unwrap();
            let cache = forward(&c, &p, &ds.inputs[0]).unwrap();
            let g = grad_theta_f(&c, &p, &cache);
            let r = check_output_gradient(&c, &p, &ds.inputs[0], &g, 20, FD_STEP, seed, FdPrecision::DoubleDouble).unwrap();
            assert!(r.max_rel_error <= 1e-6, "{r}");
        }
    }

    #[test]
    fn loss_gradient_cases() {
        let c = cfg(16, 3);
        let p = init_params(&c, 8);
        let ds = Dataset::generate(5, 4, 8).unwrap();
        let (g, res) = grad_loss(&c, &p, &ds).unwrap();
        let r = check_loss_gradient(&c, &p, &ds, &g, 20, FD_STEP, 8, FdPrecision::DoubleDouble).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r}");

        // labels equal to outputs: zero gradient
        let fitted = Dataset::new(
            ds.inputs.clone(),
            ds.labels.iter().zip(&res).map(|(y, r)| y + r).collect(),
        );
        if let Ok(fitted) = fitted {
            let (g0, r0) = grad_loss(&c, &p, &fitted).unwrap();
            assert!(r0.iter().all(|r| r.abs() < 1e-15));
            assert!(g0.norm() < 1e-14);
        }

        // a single sample reduces to (f − y) ∇f
        let one = Dataset::new(alloc::vec![ds.inputs[0].clone()], alloc::vec![ds.labels[0]]).unwrap();
        let (g1, r1) = grad_loss(&c, &p, &one).unwrap();
        let cache = forward(&c, &p, &ds.inputs[0]).unwrap();
        let mut expect = GradTheta::zeros(&c);
        expect.axpy(r1[0], &grad_theta_f(&c, &p, &cache));
        let mut diff = g1.clone();
        diff.axpy(-1.0, &expect);
        assert!(diff.norm() <= 1e-15 * expect.norm());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let c = cfg(8, 2);
        let p = init_params(&c, 1);
        let ds = Dataset::generate(3, 4, 1).unwrap();
        let res = residuals(&c, &p, &ds).unwrap();
        let labels: Vec<f64> = ds.labels.iter().zip(&res).map(|(y, r)| y + r).collect();
        if labels.iter().all(|y| y.abs() <= 1.0) {
            let fitted = Dataset::new(ds.inputs.clone(), labels).unwrap();
            let st = FlowState::new(p.clone(), 1e-2, Scheme::Rk4).unwrap();
            let out = flow_step(&st, &c, &fitted).unwrap();
            assert_eq!(out.state.params, p);
            assert_eq!(out.state.t, 1e-2);
        }
    }

    #[test]
    fn flow_step_decreases_loss() {
        let c = cfg(64, 3);
        let p = init_params(&c, 2);
        let ds = Dataset::generate(8, 4, 2).unwrap();
        let mut st = FlowState::new(p, 1e-3, Scheme::Rk4).unwrap();
        for _ in 0..5 {
            let out = flow_step(&st, &c, &ds).unwrap();
            assert!(out.warning.is_none());
            assert!(out.loss_after <= out.loss_before);
            st = out.state;
        }
    }

    #[test]
    fn rk4_agrees_with_richardson_euler() {
        let c = cfg(16, 3);
        let p0 = init_params(&c, 6);
        let ds = Dataset::generate(4, 4, 6).unwrap();
        let run = |h: f64, scheme: Scheme, steps: usize| {
            let mut p = p0.clone();
            for _ in 0..steps {
                p = integrate(&c, &p, &ds, h, scheme).unwrap().0;
            }
            p
        };
        // Richardson-extrapolated Euler is second order; its gap to rk4
        // should shrink ≈ 4× per halving
        let mut gaps = alloc::vec::Vec::new();
        for (h, steps) in [(0.2, 5usize), (0.1, 10), (0.05, 20)] {
            let e1 = run(h, Scheme::Euler, steps);
            let e2 = run(h / 2.0, Scheme::Euler, 2 * steps);
            let rk = run(h, Scheme::Rk4, steps);
            let mut rich = e2.clone();
            let mut diff = GradTheta::zeros(&c);
            for k in 0..rich.num_blocks() {
                for (i, v) in rich.block_mut(k).iter_mut().enumerate() {
                    *v = 2.0 * *v - e1.block(k)[i];
                }
                for (i, v) in diff.block_mut(k).iter_mut().enumerate() {
                    *v = rich.block(k)[i] - rk.block(k)[i];
                }
            }
            gaps.push(diff.norm());
        }
        let slope = math::log_log_slope(&[0.2, 0.1, 0.05], &gaps);
        assert!(slope > 1.7, "slope {slope}, gaps {gaps:?}");
    }

    #[test]
    fn non_positive_step_rejected() {
        let c = cfg(8, 2);
        let p = init_params(&c, 1);
        assert!(matches!(FlowState::new(p, 0.0, Scheme::Euler), Err(Error::NonPositiveStep(_))));
    }

    #[test]
    fn spectral_diag_cases() {
        let c = cfg(256, 3);
        let z = Params::zeros(&c);
        let d = spectral_diag(&c, &z).unwrap();
        assert_eq!(d.xi, 1.0);
        assert_eq!(d.omega, 0.0);
        for seed in 0..20 {
            let p = init_params(&c, seed);
            let d = spectral_diag(&c, &p).unwrap();
            assert!(d.xi >= 1.0 && d.xi <= 3.0, "seed {seed}: {}", d.xi);
        }
        let _ = EIG_TOL;
    }
}
