//! Experiment specifications: one JSON document per run, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nth_lab_core::dynamics::{FdPrecision, Scheme};
use nth_lab_core::model::{compute_c_sigma, FEEDFORWARD_GAIN};
use nth_lab_core::{Activation, Dataset, NetworkConfig, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

/// Environment variable overriding [`ExperimentSpec::base_seed`].
pub const SEED_ENV: &str = "NTH_LAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    GradCheck,
    Flow,
    DriftScan,
    DepthScan,
    LimitGram,
    NthCheck,
    KernelRegression,
}

impl CommandKind {
    pub const ALL: [CommandKind; 7] = [
        CommandKind::GradCheck,
        CommandKind::Flow,
        CommandKind::DriftScan,
        CommandKind::DepthScan,
        CommandKind::LimitGram,
        CommandKind::NthCheck,
        CommandKind::KernelRegression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::GradCheck => "grad-check",
            CommandKind::Flow => "flow",
            CommandKind::DriftScan => "drift-scan",
            CommandKind::DepthScan => "depth-scan",
            CommandKind::LimitGram => "limit-gram",
            CommandKind::NthCheck => "nth-check",
            CommandKind::KernelRegression => "kernel-regression",
        }
    }

    /// File stem for this command's outputs.
    pub fn stem(self) -> String {
        self.name().replace('-', "_")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(default = "default_c_res")]
    pub c_res: f64,
    #[serde(default = "default_activation")]
    pub activation: String,
}

fn default_c_res() -> f64 {
    nth_lab_core::model::DEFAULT_C_RES
}

fn default_activation() -> String {
    "softplus".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Generated { seed: u64, n: usize, d: usize },
    /// CSV with columns `x1..xd, y`; lines starting with `#` are ignored.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeSpec {
    Euler,
    Rk4,
}

impl From<SchemeSpec> for Scheme {
    fn from(s: SchemeSpec) -> Self {
        match s {
            SchemeSpec::Euler => Scheme::Euler,
            SchemeSpec::Rk4 => Scheme::Rk4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionSpec {
    F64,
    DoubleDouble,
}

impl From<PrecisionSpec> for FdPrecision {
    fn from(p: PrecisionSpec) -> Self {
        match p {
            PrecisionSpec::F64 => FdPrecision::F64,
            PrecisionSpec::DoubleDouble => FdPrecision::DoubleDouble,
        }
    }
}

/// Perturbation added to one analytic gradient entry before comparison;
/// used to check that the gradient checker catches errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    /// Block name, `W1`..`WL` or `a`.
    pub block: String,
    pub index: usize,
    pub delta: f64,
}

/// Command-specific knobs; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    pub probes_per_block: usize,
    pub fd_step: f64,
    pub fd_precision: PrecisionSpec,
    pub fault: Option<Fault>,
    /// Record every k-th integration step.
    pub record_every: usize,
    /// Compute ξ and ω every k-th record; 0 disables them.
    pub xi_every: usize,
    /// Replace the labels by the initial outputs.
    pub zero_residual: bool,
    /// Extra widths appended to `m_list` under `--heavy`.
    pub heavy_m_list: Vec<usize>,
    pub bootstrap: usize,
    pub delta: f64,
    pub time_points: usize,
    pub nodes: usize,
    pub check_nodes: usize,
    pub concentration_m_list: Vec<usize>,
    /// Layer for the Monte-Carlo kernel estimate; defaults to `L`.
    pub mc_layer: Option<usize>,
    pub m_probe: usize,
    /// Monte-Carlo replicates; 0 skips the estimate.
    pub replicates: usize,
    pub feedforward_gain: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            probes_per_block: 10,
            fd_step: nth_lab_core::dynamics::FD_STEP,
            fd_precision: PrecisionSpec::DoubleDouble,
            fault: None,
            record_every: 1,
            xi_every: 10,
            zero_residual: false,
            heavy_m_list: vec![4096],
            bootstrap: 1000,
            delta: 1e-3,
            time_points: 5,
            nodes: nth_lab_core::limitgram::DEFAULT_NODES,
            check_nodes: nth_lab_core::limitgram::CHECK_NODES,
            concentration_m_list: vec![256, 512, 1024, 2048, 4096],
            mc_layer: None,
            m_probe: 2048,
            replicates: 32,
            feedforward_gain: FEEDFORWARD_GAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub command: CommandKind,
    pub config: NetworkSpec,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_list: Option<Vec<usize>>,
    #[serde(rename = "L_list", default, skip_serializing_if = "Option::is_none")]
    pub l_list: Option<Vec<usize>>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub step: f64,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub options: Options,
}

fn default_scheme() -> SchemeSpec {
    SchemeSpec::Rk4
}

fn generated(n: usize) -> DatasetSpec {
    DatasetSpec::Generated { seed: 7, n, d: 4 }
}

impl ExperimentSpec {
    /// The desk-scale default for each command.
    pub fn preset(command: CommandKind) -> Self {
        let net = |m: usize, depth: usize| NetworkSpec {
            d: 4,
            m,
            depth,
            c_res: default_c_res(),
            activation: default_activation(),
        };
        let ten: Vec<u64> = (0..10).collect();
        let base = |config: NetworkSpec, n: usize| ExperimentSpec {
            command,
            config,
            dataset: generated(n),
            m_list: None,
            l_list: None,
            horizon: 1.0,
            step: 0.05,
            scheme: SchemeSpec::Rk4,
            seeds: vec![0],
            base_seed: 0,
            output_dir: None,
            options: Options::default(),
        };
        match command {
            CommandKind::GradCheck => ExperimentSpec {
                seeds: (0..5).collect(),
                ..base(net(16, 3), 5)
            },
            CommandKind::Flow => ExperimentSpec {
                horizon: 5.0,
                step: 0.05,
                ..base(net(512, 4), 8)
            },
            CommandKind::DriftScan => {
                let mut s = ExperimentSpec {
                    m_list: Some(vec![128, 256, 512, 1024, 2048]),
                    horizon: 2.0,
                    step: 0.1,
                    seeds: ten,
                    ..base(net(128, 4), 8)
                };
                s.options.xi_every = 0;
                s
            }
            CommandKind::DepthScan => ExperimentSpec {
                l_list: Some(vec![2, 4, 8, 16, 32]),
                seeds: ten,
                ..base(net(512, 4), 8)
            },
            CommandKind::LimitGram => ExperimentSpec {
                seeds: ten,
                ..base(net(4096, 4), 8)
            },
            CommandKind::NthCheck => {
                let mut s = ExperimentSpec {
                    horizon: 2.0,
                    step: 0.01,
                    ..base(net(64, 3), 6)
                };
                s.options.xi_every = 0;
                s
            }
            CommandKind::KernelRegression => {
                let mut s = ExperimentSpec {
                    m_list: Some(vec![128, 256, 512, 1024]),
                    horizon: 5.0,
                    step: 0.05,
                    seeds: (0..4).collect(),
                    ..base(net(128, 4), 8)
                };
                s.options.xi_every = 0;
                s
            }
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> LabResult<Self> {
        serde_json::from_str(text).map_err(|source| LabError::Json {
            path: origin.to_path_buf(),
            source,
        })
    }

    /// Reads and validates a spec; relative dataset paths are resolved
    /// against the spec file's directory.
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LabError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec = Self::from_json(&text, path)?;
        if let DatasetSpec::File { path: p } = &mut spec.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn activation(&self) -> LabResult<Activation> {
        Activation::from_name(&self.config.activation)
            .ok_or_else(|| LabError::Config(format!("unknown activation {:?}", self.config.activation)))
    }

    /// The network at width `m` and depth `depth`.
    pub fn network(&self, m: usize, depth: usize) -> LabResult<NetworkConfig> {
        let act = self.activation()?;
        let c_sigma = compute_c_sigma(act).map_err(LabError::Numerical)?;
        NetworkConfig::with_c_sigma(self.config.d, m, depth, self.config.c_res, act, c_sigma)
            .map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn base_network(&self) -> LabResult<NetworkConfig> {
        self.network(self.config.m, self.config.depth)
    }

    pub fn m_list(&self, heavy: bool) -> Vec<usize> {
        let mut v = self.m_list.clone().unwrap_or_else(|| vec![self.config.m]);
        if heavy {
            for &m in &self.options.heavy_m_list {
                if !v.contains(&m) {
                    v.push(m);
                }
            }
        }
        v
    }

    pub fn l_list(&self) -> Vec<usize> {
        self.l_list.clone().unwrap_or_else(|| vec![self.config.depth])
    }

    /// Initialization seed for list entry `s`.
    pub fn init_seed(&self, s: u64) -> u64 {
        self.base_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s)
    }

    pub fn init_seeds(&self) -> Vec<u64> {
        self.seeds.iter().map(|&s| self.init_seed(s)).collect()
    }

    /// Applies a base-seed override (the value of [`SEED_ENV`], if set).
    /// Returns whether the seed was overridden.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> LabResult<bool> {
        match value {
            None => Ok(false),
            Some(v) => {
                self.base_seed = v
                    .trim()
                    .parse()
                    .map_err(|_| LabError::Config(format!("{SEED_ENV} = {v:?} is not an unsigned integer")))?;
                Ok(true)
            }
        }
    }

    pub fn dataset(&self) -> LabResult<Dataset> {
        match &self.dataset {
            DatasetSpec::Generated { seed, n, d } => {
                Dataset::generate(*n, *d, *seed).map_err(|e| LabError::Config(e.to_string()))
            }
            DatasetSpec::File { path } => read_dataset(path),
        }
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        self.activation()?;
        self.base_network()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("T = {} must be positive", self.horizon));
        }
        if !(self.step > 0.0 && self.step <= self.horizon) {
            return bad(format!("step = {} must lie in (0, T]", self.step));
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        for (name, grid) in [("m_list", &self.m_list), ("L_list", &self.l_list)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return bad(format!("{name} is empty"));
                }
            }
        }
        for &m in self.m_list(true).iter().chain(&self.options.concentration_m_list) {
            self.network(m, self.config.depth)?;
        }
        for &l in &self.l_list() {
            self.network(self.config.m, l)?;
        }
        match self.command {
            CommandKind::DriftScan if self.m_list(false).len() < 4 => {
                return bad("drift-scan needs at least 4 widths in m_list".into())
            }
            CommandKind::DepthScan if self.l_list().len() < 4 => {
                return bad("depth-scan needs at least 4 depths in L_list".into())
            }
            _ => {}
        }
        let o = &self.options;
        if o.probes_per_block == 0 || !(o.fd_step > 0.0) {
            return bad("probes_per_block and fd_step must be positive".into());
        }
        if o.record_every == 0 || o.time_points == 0 || o.nodes == 0 || o.check_nodes == 0 {
            return bad("record_every, time_points and node counts must be positive".into());
        }
        if !(o.delta > 0.0) {
            return bad(format!("delta = {} must be positive", o.delta));
        }
        if o.replicates > 0 && (o.replicates < 8 || o.m_probe < 256) {
            return bad("Monte-Carlo estimate needs replicates ≥ 8 and m_probe ≥ 256".into());
        }
        if let Some(l) = o.mc_layer {
            if l == 0 || l > self.config.depth {
                return bad(format!("mc_layer {l} outside 1..={}", self.config.depth));
            }
        }
        if o.concentration_m_list.is_empty() {
            return bad("concentration_m_list is empty".into());
        }
        let d = match &self.dataset {
            DatasetSpec::Generated { d, n, .. } => {
                if *n == 0 {
                    return bad("dataset must have at least one sample".into());
                }
                *d
            }
            DatasetSpec::File { .. } => self.dataset()?.d(),
        };
        if d != self.config.d {
            return bad(format!("dataset dimension {d} differs from config d = {}", self.config.d));
        }
        Ok(())
    }
}

/// Reads `x1..xd, y` rows; `#` lines are comments.
pub fn read_dataset(path: &Path) -> LabResult<Dataset> {
    let csv_err = |source| LabError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| LabError::Config(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        if vals.len() < 2 {
            return Err(LabError::Config(format!("{}: row {} has fewer than 2 columns", path.display(), row + 1)));
        }
        let (x, y) = vals.split_at(vals.len() - 1);
        inputs.push(Vector::from_vec(x.to_vec()));
        labels.push(y[0]);
    }
    Dataset::new(inputs, labels).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}
