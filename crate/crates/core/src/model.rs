//! Activations, network configuration, parameters, datasets and the residual
//! forward map.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix, Vector};
use crate::math;
use crate::quadrature::GaussHermite;
use crate::rng::GaussianRng;

/// Nodes used for the activation normalization constant.
pub const C_SIGMA_NODES: usize = 200;

pub const DEFAULT_C_RES: f64 = 0.5;
pub const DEFAULT_D: usize = 4;
pub const DEFAULT_N: usize = 8;

/// Inputs whose pairwise |cosine| reaches this are rejected by the generator.
pub const GENERATOR_PARALLEL_TOL: f64 = 1.0 - 1e-6;

/// Pairwise |cosine| at or above this makes a dataset invalid.
pub const DATASET_PARALLEL_TOL: f64 = 1.0 - 1e-9;

/// Per-layer gain of the feedforward comparison network.
pub const FEEDFORWARD_GAIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Softplus,
    Sigmoid,
    Identity,
    /// σ ≡ 0; only useful for exercising degenerate paths.
    Zero,
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x > 30.0 {
                    x + math::ln_1p(math::exp(-x))
                } else {
                    math::ln_1p(math::exp(x))
                }
            }
            Activation::Sigmoid => logistic(x),
            Activation::Identity => x,
            Activation::Zero => 0.0,
        }
    }

    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => logistic(x),
            Activation::Sigmoid => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
            Activation::Zero => 0.0,
        }
    }

    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = logistic(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Identity | Activation::Zero => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
            Activation::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "softplus" => Some(Activation::Softplus),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            "zero" => Some(Activation::Zero),
            _ => None,
        }
    }
}

/// `c_σ = 1 / E[σ(Z)²]` with `Z ~ N(0, 1)`.
pub fn compute_c_sigma(activation: Activation) -> Result<f64> {
    compute_c_sigma_with(activation, C_SIGMA_NODES)
}

pub fn compute_c_sigma_with(activation: Activation, nodes: usize) -> Result<f64> {
    let gh = GaussHermite::new(nodes);
    let second = gh.expect1(|z| {
        let s = activation.value(z);
        s * s
    });
    if !(second > 1e-300) || !second.is_finite() {
        return Err(Error::DegenerateActivation {
            second_moment: second,
        });
    }
    Ok(1.0 / second)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub d: usize,
    pub m: usize,
    /// Depth `L`.
    pub depth: usize,
    pub c_res: f64,
    pub activation: Activation,
    pub c_sigma: f64,
}

impl NetworkConfig {
    pub fn new(d: usize, m: usize, depth: usize, c_res: f64, activation: Activation) -> Result<Self> {
        let c_sigma = compute_c_sigma(activation)?;
        Self::with_c_sigma(d, m, depth, c_res, activation, c_sigma)
    }

    /// Like [`NetworkConfig::new`] but with a caller-supplied `c_σ`.
    pub fn with_c_sigma(
        d: usize,
        m: usize,
        depth: usize,
        c_res: f64,
        activation: Activation,
        c_sigma: f64,
    ) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!("d = {d} and m = {m} must be positive")));
        }
        if depth < 2 {
            return Err(Error::InvalidConfig(format!("depth L = {depth} must be at least 2")));
        }
        if !(c_res > 0.0 && c_res < 1.0) {
            return Err(Error::InvalidConfig(format!("c_res = {c_res} must lie in (0, 1)")));
        }
        if !(c_sigma > 0.0 && c_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("c_sigma = {c_sigma} must be positive")));
        }
        Ok(Self {
            d,
            m,
            depth,
            c_res,
            activation,
            c_sigma,
        })
    }

    /// `√(c_σ / m)`, the first-layer scale.
    #[inline]
    pub fn first_scale(&self) -> f64 {
        math::sqrt(self.c_sigma / self.m as f64)
    }

    /// `c_res / (L √m)`, the residual-branch scale.
    #[inline]
    pub fn res_scale(&self) -> f64 {
        self.c_res / (self.depth as f64 * math::sqrt(self.m as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Matrix,
    /// `W^[2] .. W^[L]`.
    pub w: Vec<Matrix>,
    pub a: Vector,
}

impl Params {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Self {
            w1: Matrix::zeros(config.m, config.d),
            w: (1..config.depth)
                .map(|_| Matrix::zeros(config.m, config.m))
                .collect(),
            a: Vector::zeros(config.m),
        }
    }

    /// `W1, W2, …, WL, a`.
    pub fn num_blocks(&self) -> usize {
        self.w.len() + 2
    }

    pub fn block_name(&self, k: usize) -> String {
        if k == self.num_blocks() - 1 {
            String::from("a")
        } else {
            format!("W{}", k + 1)
        }
    }

    pub fn block(&self, k: usize) -> &[f64] {
        match k {
            0 => self.w1.as_slice(),
            k if k <= self.w.len() => self.w[k - 1].as_slice(),
            _ => &self.a,
        }
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [f64] {
        let nw = self.w.len();
        match k {
            0 => self.w1.as_mut_slice(),
            k if k <= nw => self.w[k - 1].as_mut_slice(),
            _ => &mut self.a,
        }
    }

    pub fn num_params(&self) -> usize {
        (0..self.num_blocks()).map(|k| self.block(k).len()).sum()
    }

    /// Concatenation in block order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for k in 0..self.num_blocks() {
            out.extend_from_slice(self.block(k));
        }
        out
    }

    /// `‖self − other‖_F` over all blocks.
    pub fn distance(&self, other: &Params) -> f64 {
        let mut s = 0.0;
        for k in 0..self.num_blocks() {
            for (x, y) in self.block(k).iter().zip(other.block(k)) {
                s += (x - y) * (x - y);
            }
        }
        math::sqrt(s)
    }

    pub fn is_finite(&self) -> bool {
        (0..self.num_blocks()).all(|k| self.block(k).iter().all(|x| x.is_finite()))
    }
}

/// All blocks i.i.d. `N(0, 1)`, drawn in block order, each row-major.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Params {
    let mut rng = GaussianRng::new(seed);
    let mut p = Params::zeros(config);
    for k in 0..p.num_blocks() {
        rng.fill_normal(p.block_mut(k));
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vector>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vector>, labels: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidDataset(String::from("no samples")));
        }
        if inputs.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let d = inputs[0].len();
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != d {
                return Err(Error::InvalidDataset(format!(
                    "input {i} has dimension {} (expected {d})",
                    x.len()
                )));
            }
            if !x.is_finite() {
                return Err(Error::InvalidDataset(format!("input {i} is not finite")));
            }
            let nrm = x.norm2();
            if math::abs(nrm - 1.0) > 1e-12 {
                return Err(Error::InvalidDataset(format!("input {i} has norm {nrm}")));
            }
        }
        for (i, y) in labels.iter().enumerate() {
            if !(math::abs(*y) <= 1.0) {
                return Err(Error::InvalidDataset(format!("label {i} = {y} outside [-1, 1]")));
            }
        }
        for i in 0..inputs.len() {
            for j in 0..i {
                let c = dot(&inputs[i], &inputs[j]);
                if math::abs(c) >= DATASET_PARALLEL_TOL {
                    return Err(Error::InvalidDataset(format!(
                        "inputs {j} and {i} are parallel (cosine {c})"
                    )));
                }
            }
        }
        Ok(Self { inputs, labels })
    }

    /// Unit inputs (normalized Gaussians) and labels uniform on [−1, 1];
    /// candidates nearly parallel to an accepted input are redrawn.
    pub fn generate(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidDataset(format!("n = {n}, d = {d}")));
        }
        let mut rng = GaussianRng::new(seed);
        let mut inputs: Vec<Vector> = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while inputs.len() < n {
            attempts += 1;
            if attempts > 1000 * n {
                return Err(Error::InvalidDataset(String::from(
                    "could not draw enough non-parallel inputs",
                )));
            }
            let mut x = Vector::zeros(d);
            rng.fill_normal(&mut x);
            let nrm = x.norm2();
            if nrm == 0.0 {
                continue;
            }
            x.iter_mut().for_each(|v| *v /= nrm);
            if inputs
                .iter()
                .any(|p| math::abs(dot(p, &x)) >= GENERATOR_PARALLEL_TOL)
            {
                continue;
            }
            inputs.push(x);
            labels.push(rng.uniform(-1.0, 1.0));
        }
        Self::new(inputs, labels)
    }

    /// Same inputs with new labels. Only the length is checked: labels set to
    /// the network's own outputs (a zero-residual start) need not lie in [−1, 1].
    pub fn relabel(&self, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != self.n() || labels.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "{} finite labels required, got {:?}",
                self.n(),
                labels
            )));
        }
        Ok(Self {
            inputs: self.inputs.clone(),
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn d(&self) -> usize {
        self.inputs[0].len()
    }

    /// Input Gram matrix `XXᵀ`.
    pub fn gram(&self) -> Matrix {
        let n = self.n();
        Matrix::from_fn(n, n, |i, j| dot(&self.inputs[i], &self.inputs[j]))
    }
}

/// Layer outputs and activation derivatives of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// `x^[0] .. x^[L]`.
    pub x_layers: Vec<Vector>,
    /// `z^[l] = W^[l] x^[l−1]`, stored at index `l − 1`.
    pub z_layers: Vec<Vector>,
    /// `σ'(z^[l])`, stored at index `l − 1`.
    pub sprime_layers: Vec<Vector>,
}

impl ForwardCache {
    #[inline]
    pub fn x(&self, l: usize) -> &Vector {
        &self.x_layers[l]
    }

    #[inline]
    pub fn z(&self, l: usize) -> &Vector {
        &self.z_layers[l - 1]
    }

    #[inline]
    pub fn sprime(&self, l: usize) -> &Vector {
        &self.sprime_layers[l - 1]
    }

    pub fn depth(&self) -> usize {
        self.z_layers.len()
    }

    pub fn output_layer(&self) -> &Vector {
        self.x_layers.last().expect("cache has at least the input layer")
    }
}

fn check_input(config: &NetworkConfig, x: &[f64]) -> Result<()> {
    if x.len() != config.d {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left: (config.m, config.d),
            right: (x.len(), 1),
        });
    }
    let nrm = norm2(x);
    if math::abs(nrm - 1.0) > 1e-12 {
        log::warn!("forward input has norm {nrm}, expected 1");
    }
    Ok(())
}

fn finite_or(layer: usize, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLayer { layer })
    }
}

pub fn forward(config: &NetworkConfig, params: &Params, x: &[f64]) -> Result<ForwardCache> {
    let mut out = forward_batch(config, params, &[Vector::from(x.to_vec())])?;
    Ok(out.pop().expect("one input"))
}

/// [`forward`] for several inputs at once; each weight matrix is read once
/// for the whole batch. Every cache equals the single-input result exactly.
pub fn forward_batch(config: &NetworkConfig, params: &Params, inputs: &[Vector]) -> Result<Vec<ForwardCache>> {
    for x in inputs {
        check_input(config, x)?;
    }
    let act = config.activation;
    let m = config.m;
    let depth = config.depth;
    let k = inputs.len();
    let mut caches: Vec<ForwardCache> = inputs
        .iter()
        .map(|x| {
            let mut x_layers = Vec::with_capacity(depth + 1);
            x_layers.push(x.clone());
            ForwardCache {
                x_layers,
                z_layers: Vec::with_capacity(depth),
                sprime_layers: Vec::with_capacity(depth),
            }
        })
        .collect();

    let mut zs: Vec<Vector> = (0..k).map(|_| Vector::zeros(m)).collect();
    params.w1.matvec_batch_into(inputs, &mut zs);
    let s1 = config.first_scale();
    for (c, z) in caches.iter_mut().zip(zs) {
        let x1: Vector = z.iter().map(|&v| s1 * act.value(v)).collect::<Vec<_>>().into();
        finite_or(1, &x1)?;
        c.sprime_layers.push(z.iter().map(|&v| act.d1(v)).collect::<Vec<_>>().into());
        c.z_layers.push(z);
        c.x_layers.push(x1);
    }

    let rs = config.res_scale();
    for l in 2..=depth {
        let prev: Vec<Vector> = caches.iter().map(|c| c.x_layers[l - 1].clone()).collect();
        let mut zs: Vec<Vector> = (0..k).map(|_| Vector::zeros(m)).collect();
        params.w[l - 2].matvec_batch_into(&prev, &mut zs);
        for ((c, z), mut next) in caches.iter_mut().zip(zs).zip(prev) {
            for (o, &zi) in next.iter_mut().zip(z.iter()) {
                *o += rs * act.value(zi);
            }
            finite_or(l, &next)?;
            c.sprime_layers.push(z.iter().map(|&v| act.d1(v)).collect::<Vec<_>>().into());
            c.z_layers.push(z);
            c.x_layers.push(next);
        }
    }
    Ok(caches)
}

/// `f = aᵀ x^[L]`
pub fn network_output(cache: &ForwardCache, params: &Params) -> f64 {
    dot(&params.a, cache.output_layer())
}

/// Final-layer outputs at initialization for every input, without storing the
/// weights. Draws the same normals, in the same order, as [`init_params`], so
/// the result equals a forward pass under `init_params(config, seed)`.
pub fn forward_at_init(config: &NetworkConfig, seed: u64, inputs: &[Vector]) -> Result<Vec<Vector>> {
    Ok(forward_layers_at_init(config, seed, inputs)?.pop().expect("depth ≥ 2"))
}

/// Like [`forward_at_init`] but keeps every layer: `out[l − 1][i] = x^[l]_i`.
pub fn forward_layers_at_init(config: &NetworkConfig, seed: u64, inputs: &[Vector]) -> Result<Vec<Vec<Vector>>> {
    for x in inputs {
        check_input(config, x)?;
    }
    let act = config.activation;
    let (m, d) = (config.m, config.d);
    let mut rng = GaussianRng::new(seed);
    let mut row = alloc::vec![0.0; m.max(d)];

    let s1 = config.first_scale();
    let mut cur: Vec<Vector> = inputs.iter().map(|_| Vector::zeros(m)).collect();
    for i in 0..m {
        rng.fill_normal(&mut row[..d]);
        for (x, out) in inputs.iter().zip(cur.iter_mut()) {
            out[i] = s1 * act.value(dot(&row[..d], x));
        }
    }
    for out in &cur {
        finite_or(1, out)?;
    }
    let rs = config.res_scale();
    let mut layers = Vec::with_capacity(config.depth);
    for l in 2..=config.depth {
        let mut next = cur.clone();
        for i in 0..m {
            rng.fill_normal(&mut row[..m]);
            for (prev, out) in cur.iter().zip(next.iter_mut()) {
                out[i] += rs * act.value(dot(&row[..m], prev));
            }
        }
        for out in &next {
            finite_or(l, out)?;
        }
        layers.push(core::mem::replace(&mut cur, next));
    }
    layers.push(cur);
    Ok(layers)
}

/// A plain stack without skip connections,
/// `x^[l] = gain · √(c_σ/m) · σ(W^[l] x^[l−1])`, run on the same weights.
/// Returns `x^[L]`.
pub fn feedforward(config: &NetworkConfig, params: &Params, x: &[f64], gain: f64) -> Result<Vector> {
    check_input(config, x)?;
    let act = config.activation;
    let s = gain * config.first_scale();
    let mut z = Vector::zeros(config.m);
    params.w1.matvec_into(x, &mut z);
    let mut cur: Vector = z.iter().map(|&v| s * act.value(v)).collect::<Vec<_>>().into();
    finite_or(1, &cur)?;
    for (k, w) in params.w.iter().enumerate() {
        w.matvec_into(&cur, &mut z);
        cur = z.iter().map(|&v| s * act.value(v)).collect::<Vec<_>>().into();
        finite_or(k + 2, &cur)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, k: usize) -> Vec<f64> {
        let mut v = alloc::vec![0.0; d];
        v[k] = 1.0;
        v
    }

    #[test]
    fn activation_regularity_on_grid() {
        for act in [Activation::Softplus, Activation::Sigmoid] {
            assert!(act.value(0.0).abs() <= 1.0);
            let mut x = -20.0;
            while x <= 20.0 {
                assert!(act.d1(x).abs() <= 1.0, "{act:?} d1 at {x}");
                assert!(act.d2(x).abs() <= 1.0, "{act:?} d2 at {x}");
                x += 0.01;
            }
        }
    }

    #[test]
    fn activation_derivatives_match_differences() {
        let h = 1e-5;
        for act in [Activation::Softplus, Activation::Sigmoid, Activation::Identity] {
            for &x in &[-7.0, -1.3, 0.0, 0.4, 2.2, 29.0, 31.0, 45.0] {
                let fd1 = (act.value(x + h) - act.value(x - h)) / (2.0 * h);
                let fd2 = (act.d1(x + h) - act.d1(x - h)) / (2.0 * h);
                assert!((fd1 - act.d1(x)).abs() < 1e-8, "{act:?} d1 at {x}");
                assert!((fd2 - act.d2(x)).abs() < 1e-8, "{act:?} d2 at {x}");
            }
        }
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(Activation::Softplus.value(1000.0), 1000.0);
        assert_eq!(Activation::Softplus.value(-1000.0), 0.0);
        assert!(Activation::Softplus.value(1e300).is_finite());
    }

    #[test]
    fn c_sigma_identity_is_one() {
        assert!((compute_c_sigma(Activation::Identity).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn c_sigma_converged_against_more_nodes() {
        for act in [Activation::Softplus, Activation::Sigmoid, Activation::Identity] {
            let a = compute_c_sigma_with(act, 200).unwrap();
            let b = compute_c_sigma_with(act, 400).unwrap();
            assert!(((a - b) / b).abs() <= 1e-10, "{act:?}: {a} vs {b}");
        }
    }

    #[test]
    fn c_sigma_degenerate() {
        assert!(matches!(
            compute_c_sigma(Activation::Zero),
            Err(Error::DegenerateActivation { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::new(4, 8, 1, 0.5, Activation::Softplus).is_err());
        assert!(NetworkConfig::new(4, 8, 3, 1.0, Activation::Softplus).is_err());
        assert!(NetworkConfig::new(4, 8, 3, 0.0, Activation::Softplus).is_err());
        assert!(NetworkConfig::new(0, 8, 3, 0.5, Activation::Softplus).is_err());
        assert!(NetworkConfig::new(4, 8, 3, 0.5, Activation::Zero).is_err());
        assert!(NetworkConfig::with_c_sigma(4, 8, 3, 0.5, Activation::Zero, 1.0).is_ok());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = NetworkConfig::new(4, 16, 3, 0.5, Activation::Softplus).unwrap();
        let p = init_params(&cfg, 5);
        assert_eq!(p, init_params(&cfg, 5));
        assert_ne!(p, init_params(&cfg, 6));
        assert_eq!(p.w1.shape(), (16, 4));
        assert_eq!(p.w.len(), 2);
        assert_eq!(p.num_params(), 16 * 4 + 2 * 256 + 16);
        assert_eq!(p.block_name(0), "W1");
        assert_eq!(p.block_name(3), "a");
    }

    #[test]
    fn init_output_weights_norm() {
        let cfg = NetworkConfig::new(4, 256, 2, 0.5, Activation::Softplus).unwrap();
        for seed in 0..20 {
            let p = init_params(&cfg, seed);
            let r = p.a.norm2() / 16.0;
            assert!((0.8..=1.2).contains(&r), "seed {seed}: {r}");
        }
    }

    #[test]
    fn init_second_block_variance() {
        let cfg = NetworkConfig::new(4, 128, 2, 0.5, Activation::Softplus).unwrap();
        let p = init_params(&cfg, 77);
        let w = p.w[0].as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0).abs() <= 0.05, "{var}");
    }

    #[test]
    fn zero_activation_gives_zero_output() {
        let cfg = NetworkConfig::with_c_sigma(4, 8, 3, 0.5, Activation::Zero, 1.0).unwrap();
        let p = init_params(&cfg, 1);
        let c = forward(&cfg, &p, &unit(4, 2)).unwrap();
        for l in 1..=3 {
            assert!(c.x(l).iter().all(|&v| v == 0.0));
        }
        assert_eq!(network_output(&c, &p), 0.0);
    }

    #[test]
    fn output_selectors() {
        let cfg = NetworkConfig::new(4, 8, 3, 0.5, Activation::Softplus).unwrap();
        let mut p = init_params(&cfg, 3);
        let x = unit(4, 0);
        let c = forward(&cfg, &p, &x).unwrap();
        assert_eq!(network_output(&c, &p), dot(&p.a, c.x(3)));
        p.a = Vector::zeros(8);
        assert_eq!(network_output(&c, &p), 0.0);
        p.a[5] = 1.0;
        assert_eq!(network_output(&c, &p), c.x(3)[5]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let cfg = NetworkConfig::new(4, 8, 2, 0.5, Activation::Softplus).unwrap();
        let p = init_params(&cfg, 3);
        assert!(matches!(
            forward(&cfg, &p, &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn forward_reports_non_finite_layer() {
        let cfg = NetworkConfig::new(4, 8, 3, 0.5, Activation::Identity).unwrap();
        let mut p = init_params(&cfg, 3);
        p.w[1].as_mut_slice()[0] = f64::NAN;
        let x = [0.5, 0.5, 0.5, 0.5];
        match forward(&cfg, &p, &x) {
            Err(Error::NonFiniteLayer { layer }) => assert_eq!(layer, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn streaming_init_matches_forward() {
        let cfg = NetworkConfig::new(4, 32, 4, 0.5, Activation::Softplus).unwrap();
        let ds = Dataset::generate(5, 4, 9).unwrap();
        let p = init_params(&cfg, 21);
        let streamed = forward_at_init(&cfg, 21, &ds.inputs).unwrap();
        for (x, s) in ds.inputs.iter().zip(&streamed) {
            let c = forward(&cfg, &p, x).unwrap();
            assert_eq!(c.x(4), s);
        }
        let layers = forward_layers_at_init(&cfg, 21, &ds.inputs).unwrap();
        assert_eq!(layers.len(), 4);
        for (i, x) in ds.inputs.iter().enumerate() {
            let c = forward(&cfg, &p, x).unwrap();
            for l in 1..=4 {
                assert_eq!(c.x(l), &layers[l - 1][i]);
            }
        }
    }

    #[test]
    fn first_layer_is_normalized_on_average() {
        let cfg = NetworkConfig::new(4, 1024, 2, 0.5, Activation::Softplus).unwrap();
        let x = unit(4, 1);
        let mut total = 0.0;
        for seed in 0..50 {
            let p = init_params(&cfg, seed);
            let c = forward(&cfg, &p, &x).unwrap();
            total += dot(c.x(1), c.x(1));
        }
        let mean = total / 50.0;
        assert!((mean - 1.0).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn generated_dataset_is_valid() {
        let ds = Dataset::generate(8, 4, 0).unwrap();
        assert_eq!(ds.n(), 8);
        assert_eq!(ds.d(), 4);
        assert!(ds.labels.iter().all(|y| y.abs() <= 1.0));
        let g = ds.gram();
        for i in 0..8 {
            assert!((g.get(i, i) - 1.0).abs() < 1e-12);
        }
        assert_eq!(ds, Dataset::generate(8, 4, 0).unwrap());
    }

    #[test]
    fn dataset_validation() {
        let e0 = Vector::from(unit(2, 0));
        let e1 = Vector::from(unit(2, 1));
        assert!(Dataset::new(alloc::vec![e0.clone(), e1.clone()], alloc::vec![0.1, -0.2]).is_ok());
        assert!(Dataset::new(alloc::vec![e0.clone(), e0.clone()], alloc::vec![0.1, -0.2]).is_err());
        let neg: Vector = e0.iter().map(|v| -v).collect::<Vec<_>>().into();
        assert!(Dataset::new(alloc::vec![e0.clone(), neg], alloc::vec![0.1, 0.2]).is_err());
        assert!(Dataset::new(alloc::vec![e0.clone()], alloc::vec![1.5]).is_err());
        assert!(Dataset::new(alloc::vec![Vector::from(alloc::vec![2.0, 0.0])], alloc::vec![0.0]).is_err());
        assert!(Dataset::new(alloc::vec![e0, e1], alloc::vec![0.0]).is_err());
    }
}
