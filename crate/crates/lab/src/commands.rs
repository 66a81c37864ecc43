//! The experiment commands. Each one writes `<stem>.csv` and `<stem>.json`
//! under the output directory and returns a [`Report`] of named checks.

use std::path::PathBuf;

use nth_lab_core::dynamics::{
    check_loss_gradient, check_output_coordinates, check_output_gradient, grad_loss, grad_theta_f, integrate,
    loss_from_residuals, sample_grads, spectral_diag, FdPrecision, GradCheckReport,
};
use nth_lab_core::kernel::{
    empirical_ntk, g3_kernel, kernel_regression_predict, nth_residual, output_gram, GramMatrix, KernelKind,
};
use nth_lab_core::limitgram::{
    build_limit_stack_with, concentration_row, lambda0, mc_replicate, median, stack_difference,
    summarize_concentration, DiagonalBound, LimitKernelStack, McKernel,
};
use nth_lab_core::math::log_log_slope;
use nth_lab_core::model::{feedforward, forward, init_params, network_output};
use nth_lab_core::{Dataset, Matrix, NetworkConfig, Params};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{LabError, LabResult};
use crate::output::{write_csv, write_json, Cell, RunMeta, Table};
use crate::spec::{CommandKind, ExperimentSpec};
use crate::stats::{bootstrap_slope, SlopeFit};
use crate::trajectory::{run_flow, FlowOptions, Trajectory};

/// Mixes the initialization seed into the finite-difference probe seed.
const PROBE_MIX: u64 = 0xD1B5_4A32_D192_ED03;
/// Offset of the bootstrap resampling seed from the base seed.
const BOOTSTRAP_MIX: u64 = 0xB007_57A9;

pub const GRAD_TOL: f64 = 1e-6;
pub const NTH_TOL: f64 = 5e-2;
/// Loss increases below this are floating-point noise.
pub const MONOTONE_TOL: f64 = 1e-12;
pub const RATE_TOL: f64 = 1e-6;

/// Where and how a command runs.
#[derive(Debug, Clone)]
pub struct Context {
    pub out_dir: PathBuf,
    /// Adds the opt-in heavy widths to `m_list`.
    pub heavy: bool,
    pub seed_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub command: CommandKind,
    pub checks: Vec<Check>,
    pub results: Value,
    pub files: Vec<PathBuf>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn run(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    spec.validate()?;
    match spec.command {
        CommandKind::GradCheck => grad_check(spec, ctx),
        CommandKind::Flow => flow(spec, ctx),
        CommandKind::DriftScan => drift_scan(spec, ctx),
        CommandKind::DepthScan => depth_scan(spec, ctx),
        CommandKind::LimitGram => limit_gram(spec, ctx),
        CommandKind::NthCheck => nth_check(spec, ctx),
        CommandKind::KernelRegression => kernel_regression(spec, ctx),
    }
}

fn finish(spec: &ExperimentSpec, ctx: &Context, table: &Table, checks: Vec<Check>, results: Value) -> LabResult<Report> {
    let meta = RunMeta::new(spec, &ctx.seed_source);
    let stem = spec.command.stem();
    let passed = checks.iter().all(|c| c.passed);
    let csv = write_csv(&ctx.out_dir, &stem, &meta, table)?;
    let doc = json!({ "checks": checks, "summary": results });
    let js = write_json(&ctx.out_dir, &stem, &meta, passed, &doc)?;
    Ok(Report {
        command: spec.command,
        checks,
        results,
        files: vec![csv, js],
    })
}

fn matrix_json(m: &Matrix) -> Value {
    json!((0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>())
}

fn slope_json(fit: &SlopeFit) -> Value {
    json!({ "slope": fit.slope, "ci95": [fit.lo, fit.hi], "resamples": fit.resamples })
}

fn flow_options(spec: &ExperimentSpec) -> FlowOptions {
    FlowOptions {
        horizon: spec.horizon,
        step: spec.step,
        scheme: spec.scheme.into(),
        record_every: spec.options.record_every,
        xi_every: spec.options.xi_every,
    }
}

/// `(list seed, initialization seed)` pairs.
fn seed_pairs(spec: &ExperimentSpec) -> Vec<(u64, u64)> {
    spec.seeds.iter().map(|&s| (s, spec.init_seed(s))).collect()
}

/// Turns a stopped trajectory into an error.
fn completed(tr: Trajectory, cell: &str) -> LabResult<Trajectory> {
    match tr.failure {
        Some((context, source)) => Err(LabError::NumericalAt {
            context: format!("{cell}, {context}"),
            source,
        }),
        None => Ok(tr),
    }
}

// ---------------------------------------------------------------- grad-check

fn resolve_fault(params: &Params, spec: &ExperimentSpec) -> LabResult<Option<(usize, usize, f64)>> {
    let Some(f) = &spec.options.fault else {
        return Ok(None);
    };
    let k = (0..params.num_blocks())
        .find(|&k| params.block_name(k) == f.block)
        .ok_or_else(|| LabError::Config(format!("fault block {:?} does not exist", f.block)))?;
    if f.index >= params.block(k).len() {
        return Err(LabError::Config(format!(
            "fault index {} outside block {} of length {}",
            f.index,
            f.block,
            params.block(k).len()
        )));
    }
    Ok(Some((k, f.index, f.delta)))
}

fn grad_check(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let cfg = spec.base_network()?;
    let ds = spec.dataset()?;
    let o = &spec.options;
    let precision: FdPrecision = o.fd_precision.into();
    let fault = resolve_fault(&Params::zeros(&cfg), spec)?;
    let pairs = seed_pairs(spec);
    let per_seed = pairs
        .par_iter()
        .map(|&(s, seed)| -> LabResult<Vec<(String, GradCheckReport)>> {
            let at = |what: &str| LabError::at(format!("seed {s}, {what}"));
            let params = init_params(&cfg, seed);
            let probe_seed = |a: usize| seed.wrapping_mul(PROBE_MIX).wrapping_add(a as u64);
            let mut out = Vec::with_capacity(ds.n() + 1);
            for (a, x) in ds.inputs.iter().enumerate() {
                let cache = forward(&cfg, &params, x).map_err(at("forward"))?;
                let mut g = grad_theta_f(&cfg, &params, &cache);
                if let Some((k, i, d)) = fault {
                    g.block_mut(k)[i] += d;
                }
                let mut rep = check_output_gradient(&cfg, &params, x, &g, o.probes_per_block, o.fd_step, probe_seed(a), precision)
                    .map_err(at("output gradient"))?;
                if let Some((k, i, _)) = fault {
                    // the corrupted entry is always probed
                    rep.merge(
                        check_output_coordinates(&cfg, &params, x, &g, &[(k, i)], o.fd_step, precision)
                            .map_err(at("output gradient"))?,
                    );
                }
                out.push((format!("f(x{a})"), rep));
            }
            let (mut g, _) = grad_loss(&cfg, &params, &ds).map_err(at("loss gradient"))?;
            if let Some((k, i, d)) = fault {
                g.block_mut(k)[i] += d;
            }
            let rep = check_loss_gradient(&cfg, &params, &ds, &g, o.probes_per_block, o.fd_step, probe_seed(ds.n()), precision)
                .map_err(at("loss gradient"))?;
            out.push(("loss".into(), rep));
            Ok(out)
        })
        .collect::<LabResult<Vec<_>>>()?;

    let mut table = Table::new(&[
        "seed",
        "init_seed",
        "target",
        "probes",
        "max_rel_error",
        "worst_block",
        "worst_index",
        "analytic",
        "numeric",
    ]);
    let mut worst: Option<(u64, String, GradCheckReport)> = None;
    let mut output_probes = 0;
    let mut per_seed_json = Vec::new();
    for (&(s, seed), reps) in pairs.iter().zip(&per_seed) {
        let mut seed_max: f64 = 0.0;
        for (target, r) in reps {
            table.push(vec![
                s.into(),
                seed.into(),
                target.as_str().into(),
                r.probes.into(),
                r.max_rel_error.into(),
                r.worst_block.as_str().into(),
                r.worst_index.into(),
                r.worst_analytic.into(),
                r.worst_numeric.into(),
            ]);
            if target != "loss" {
                output_probes += r.probes;
            }
            seed_max = seed_max.max(r.max_rel_error);
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.2.max_rel_error) {
                worst = Some((s, target.clone(), r.clone()));
            }
        }
        per_seed_json.push(json!({ "seed": s, "init_seed": seed, "max_rel_error": seed_max }));
    }
    let (ws, wt, w) = worst.expect("at least one seed");
    let passed = w.max_rel_error <= GRAD_TOL;
    let checks = vec![check(
        "gradient",
        passed,
        format!(
            "max relative error {:.3e} (tolerance {GRAD_TOL:e}) at block {} index {} of {wt}, seed {ws}; \
             analytic {:.12e}, numeric {:.12e}",
            w.max_rel_error, w.worst_block, w.worst_index, w.worst_analytic, w.worst_numeric
        ),
    )];
    let results = json!({
        "max_rel_error": w.max_rel_error,
        "tolerance": GRAD_TOL,
        "output_probes_per_seed": output_probes / pairs.len(),
        "fd_step": o.fd_step,
        "fd_precision": o.fd_precision,
        "fault": o.fault,
        "worst": {
            "seed": ws,
            "target": wt,
            "block": w.worst_block,
            "index": w.worst_index,
            "analytic": w.worst_analytic,
            "numeric": w.worst_numeric,
        },
        "per_seed": per_seed_json,
    });
    finish(spec, ctx, &table, checks, results)
}

// ---------------------------------------------------------------------- flow

/// `−slope` of the least-squares fit of `ln R` against `t` over positive losses.
fn fitted_decay(tr: &Trajectory) -> f64 {
    let pts: Vec<(f64, f64)> = tr.points.iter().filter(|p| p.loss > 0.0).map(|p| (p.t, p.loss.ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    -sxy / sxx
}

fn zero_residual_dataset(cfg: &NetworkConfig, params: &Params, ds: &Dataset) -> LabResult<Dataset> {
    let labels = ds
        .inputs
        .iter()
        .map(|x| forward(cfg, params, x).map(|c| network_output(&c, params)))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(ds.relabel(labels)?)
}

fn dump_last_state(spec: &ExperimentSpec, ctx: &Context, seed: u64, tr: &Trajectory, context: &str, err: &nth_lab_core::Error) -> LabResult<PathBuf> {
    let p = &tr.params;
    let blocks: Vec<Value> = (0..p.num_blocks())
        .map(|k| {
            let b = p.block(k);
            json!({
                "block": p.block_name(k),
                "frobenius": b.iter().map(|v| v * v).sum::<f64>().sqrt(),
                "max_abs": b.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
                "non_finite": b.iter().filter(|v| !v.is_finite()).count(),
            })
        })
        .collect();
    let doc = json!({
        "seed": seed,
        "t": tr.t_final,
        "context": context,
        "error": err.to_string(),
        "last_record": tr.points.last(),
        "step_losses": tr.step_losses,
        "blocks": blocks,
    });
    let meta = RunMeta::new(spec, &ctx.seed_source);
    write_json(&ctx.out_dir, &format!("{}_last_state", spec.command.stem()), &meta, false, &doc)
}

fn flow(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let cfg = spec.base_network()?;
    let ds0 = spec.dataset()?;
    let opts = flow_options(spec);
    let n = ds0.n() as f64;
    let pairs = seed_pairs(spec);
    let runs = pairs
        .par_iter()
        .map(|&(s, seed)| -> LabResult<Trajectory> {
            let params = init_params(&cfg, seed);
            let ds = if spec.options.zero_residual {
                zero_residual_dataset(&cfg, &params, &ds0)?
            } else {
                ds0.clone()
            };
            run_flow(&cfg, params, &ds, &opts).map_err(LabError::at(format!("seed {s}, initial record")))
        })
        .collect::<LabResult<Vec<_>>>()?;

    let mut table = Table::new(&[
        "seed",
        "t",
        "loss",
        "lambda_min",
        "rate",
        "kernel_drift_inf",
        "kernel_drift_fro",
        "output_drift_inf",
        "param_drift_fro",
        "xi",
        "omega",
    ]);
    for (&(s, _), tr) in pairs.iter().zip(&runs) {
        for row in tr.table().rows {
            let mut r: Vec<Cell> = vec![s.into()];
            r.extend(row);
            table.push(r);
        }
    }

    if let Some((i, tr)) = runs.iter().enumerate().find(|(_, tr)| tr.failure.is_some()) {
        let (context, err) = tr.failure.clone().expect("checked");
        let meta = RunMeta::new(spec, &ctx.seed_source);
        write_csv(&ctx.out_dir, &spec.command.stem(), &meta, &table)?;
        let dump = dump_last_state(spec, ctx, pairs[i].0, tr, &context, &err)?;
        log::error!("flow stopped early; last state written to {}", dump.display());
        return Err(LabError::NumericalAt {
            context: format!("seed {}, {context}", pairs[i].0),
            source: err,
        });
    }

    let mut decay_ok = true;
    let mut monotone_ok = true;
    let mut rate_ok = true;
    let mut worst_ratio_margin = f64::NEG_INFINITY;
    let mut worst_increase = f64::NEG_INFINITY;
    let mut worst_rate_margin = f64::INFINITY;
    let mut summaries = Vec::new();
    for (&(s, seed), tr) in pairs.iter().zip(&runs) {
        let lambda_hat = tr.lambda_hat();
        let loss0 = tr.points[0].loss;
        let loss_t = tr.points.last().expect("final record").loss;
        let bound = (-0.9 * lambda_hat * spec.horizon / n).exp();
        let ratio = if loss0 > 0.0 { loss_t / loss0 } else { 0.0 };
        decay_ok &= loss_t <= loss0 * bound;
        worst_ratio_margin = worst_ratio_margin.max(ratio / bound);
        let inc = tr.max_loss_increase();
        monotone_ok &= inc <= MONOTONE_TOL;
        worst_increase = worst_increase.max(inc);
        let margin = tr
            .points
            .iter()
            .filter(|p| p.loss > 0.0)
            .map(|p| p.rate - 2.0 * p.lambda_min / n)
            .fold(f64::INFINITY, f64::min);
        rate_ok &= margin >= -RATE_TOL;
        worst_rate_margin = worst_rate_margin.min(margin);
        summaries.push(json!({
            "seed": s,
            "init_seed": seed,
            "lambda_hat": lambda_hat,
            "loss_0": loss0,
            "loss_T": loss_t,
            "ratio": ratio,
            "decay_bound": bound,
            "fitted_decay_constant": fitted_decay(tr),
            "kernel_decay_constant": 2.0 * lambda_hat / n,
            "max_loss_increase": inc,
            "min_rate_margin": margin,
            "max_kernel_drift_inf": tr.sup(|p| p.kernel_drift_inf),
            "max_param_drift": tr.sup(|p| p.param_drift),
            "max_xi": tr.points.iter().filter_map(|p| p.xi).fold(f64::NAN, f64::max),
            "step": tr.step,
            "steps": tr.step_losses.len() - 1,
        }));
    }
    let checks = vec![
        check(
            "decay",
            decay_ok,
            format!("worst R(T)/R(0) relative to exp(-0.9 λ̂T/n): {worst_ratio_margin:.3e} (must be ≤ 1)"),
        ),
        check(
            "monotone",
            monotone_ok,
            format!("largest one-step loss increase {worst_increase:.3e} (tolerance {MONOTONE_TOL:e})"),
        ),
        check(
            "rate",
            rate_ok,
            format!("min over records of rate − 2λ_min/n: {worst_rate_margin:.3e} (tolerance −{RATE_TOL:e})"),
        ),
    ];
    let results = json!({ "zero_residual": spec.options.zero_residual, "runs": summaries });
    finish(spec, ctx, &table, checks, results)
}

// ---------------------------------------------------------------- drift-scan

struct DriftCell {
    m: usize,
    seed: u64,
    init_seed: u64,
    kernel: f64,
    kernel_fro: f64,
    output: f64,
    param: f64,
    loss_t: f64,
    lambda_hat: f64,
}

fn drift_scan(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let ds = spec.dataset()?;
    let opts = flow_options(spec);
    let m_list = spec.m_list(ctx.heavy);
    let cells: Vec<(usize, u64, u64)> = m_list
        .iter()
        .flat_map(|&m| seed_pairs(spec).into_iter().map(move |(s, seed)| (m, s, seed)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(m, s, seed)| -> LabResult<DriftCell> {
            let name = format!("m = {m}, seed {s}");
            let cfg = spec.network(m, spec.config.depth)?;
            let tr = run_flow(&cfg, init_params(&cfg, seed), &ds, &opts).map_err(LabError::at(name.clone()))?;
            let tr = completed(tr, &name)?;
            log::info!("drift-scan {name} done");
            Ok(DriftCell {
                m,
                seed: s,
                init_seed: seed,
                kernel: tr.sup(|p| p.kernel_drift_inf),
                kernel_fro: tr.sup(|p| p.kernel_drift_fro),
                output: tr.sup(|p| p.output_drift_inf),
                param: tr.sup(|p| p.param_drift),
                loss_t: tr.points.last().expect("final record").loss,
                lambda_hat: tr.lambda_hat(),
            })
        })
        .collect::<LabResult<Vec<_>>>()?;

    let mut table = Table::new(&[
        "m",
        "seed",
        "init_seed",
        "kernel_drift_sup",
        "kernel_drift_fro_sup",
        "output_drift_sup",
        "param_drift_sup",
        "loss_T",
        "lambda_hat",
    ]);
    for c in &results {
        table.push(vec![
            c.m.into(),
            c.seed.into(),
            c.init_seed.into(),
            c.kernel.into(),
            c.kernel_fro.into(),
            c.output.into(),
            c.param.into(),
            c.loss_t.into(),
            c.lambda_hat.into(),
        ]);
    }
    let xs: Vec<f64> = m_list.iter().map(|&m| m as f64).collect();
    let column = |f: fn(&DriftCell) -> f64| -> Vec<Vec<f64>> {
        m_list
            .iter()
            .map(|&m| results.iter().filter(|c| c.m == m).map(f).collect())
            .collect()
    };
    let boot = spec.options.bootstrap;
    let bseed = spec.base_seed.wrapping_add(BOOTSTRAP_MIX);
    let kernel = bootstrap_slope(&xs, &column(|c| c.kernel), boot, bseed);
    let param = bootstrap_slope(&xs, &column(|c| c.param), boot, bseed);
    let output = bootstrap_slope(&xs, &column(|c| c.output), boot, bseed);
    let kernel_fro = bootstrap_slope(&xs, &column(|c| c.kernel_fro), boot, bseed);
    let means = |v: Vec<Vec<f64>>| -> Vec<f64> { v.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect() };
    let checks = vec![
        check(
            "kernel_slope",
            (-1.3..=-0.7).contains(&kernel.slope),
            format!("kernel-drift slope {:.3} (95% CI [{:.3}, {:.3}]), required in [-1.3, -0.7]", kernel.slope, kernel.lo, kernel.hi),
        ),
        check(
            "param_slope",
            (-0.65..=-0.35).contains(&param.slope),
            format!("parameter-drift slope {:.3} (95% CI [{:.3}, {:.3}]), required in [-0.65, -0.35]", param.slope, param.lo, param.hi),
        ),
        check(
            "separation",
            kernel.slope < param.slope - 0.2,
            format!("kernel slope {:.3} vs parameter slope {:.3} − 0.2", kernel.slope, param.slope),
        ),
    ];
    let summary = json!({
        "m_list": m_list,
        "heavy": ctx.heavy,
        "mean_kernel_drift": means(column(|c| c.kernel)),
        "mean_param_drift": means(column(|c| c.param)),
        "mean_output_drift": means(column(|c| c.output)),
        "kernel_slope": slope_json(&kernel),
        "param_slope": slope_json(&param),
        "output_gram_slope": slope_json(&output),
        "kernel_fro_slope": slope_json(&kernel_fro),
    });
    finish(spec, ctx, &table, checks, summary)
}

// ---------------------------------------------------------------- depth-scan

struct DepthCell {
    depth: usize,
    seed: u64,
    resnet: Vec<f64>,
    feedforward: Vec<f64>,
    lambda_min: f64,
    xi: Option<f64>,
}

fn depth_scan(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let ds = spec.dataset()?;
    let m = spec.config.m;
    let gain = spec.options.feedforward_gain;
    let l_list = spec.l_list();
    let pairs = seed_pairs(spec);
    let cells: Vec<(usize, usize, u64, u64)> = l_list
        .iter()
        .flat_map(|&l| pairs.iter().enumerate().map(move |(k, &(s, seed))| (l, k, s, seed)))
        .collect();
    let out = cells
        .par_iter()
        .map(|&(depth, k, s, seed)| -> LabResult<DepthCell> {
            let at = LabError::at(format!("L = {depth}, seed {s}"));
            let cfg = spec.network(m, depth)?;
            let params = init_params(&cfg, seed);
            let mut resnet = Vec::with_capacity(ds.n());
            let mut ff = Vec::with_capacity(ds.n());
            for x in &ds.inputs {
                let cache = forward(&cfg, &params, x)?;
                resnet.push(cache.output_layer().norm2());
                ff.push(feedforward(&cfg, &params, x, gain)?.norm2());
            }
            let lambda_min = empirical_ntk(&cfg, &params, &ds).map_err(at)?.lambda_min;
            // the spectral diagnostic is costly at large L; first seed only
            let xi = if k == 0 && spec.options.xi_every > 0 {
                Some(spectral_diag(&cfg, &params)?.xi)
            } else {
                None
            };
            Ok(DepthCell {
                depth,
                seed: s,
                resnet,
                feedforward: ff,
                lambda_min,
                xi,
            })
        })
        .collect::<LabResult<Vec<_>>>()?;

    let mut table = Table::new(&["L", "seed", "sample", "resnet_norm", "feedforward_norm", "lambda_min_k2", "xi"]);
    for c in &out {
        for (i, (r, f)) in c.resnet.iter().zip(&c.feedforward).enumerate() {
            table.push(vec![
                c.depth.into(),
                c.seed.into(),
                i.into(),
                (*r).into(),
                (*f).into(),
                c.lambda_min.into(),
                c.xi.unwrap_or(f64::NAN).into(),
            ]);
        }
    }
    let per_l: Vec<(usize, f64, f64, f64, Option<f64>)> = l_list
        .iter()
        .map(|&l| {
            let sel: Vec<&DepthCell> = out.iter().filter(|c| c.depth == l).collect();
            let res: Vec<f64> = sel.iter().flat_map(|c| c.resnet.iter().copied()).collect();
            let ff: Vec<f64> = sel.iter().flat_map(|c| c.feedforward.iter().copied()).collect();
            let lam: Vec<f64> = sel.iter().map(|c| c.lambda_min).collect();
            (l, median(&res), median(&ff), median(&lam), sel.iter().find_map(|c| c.xi))
        })
        .collect();
    let base = per_l[0].1;
    let flagged: Vec<usize> = per_l.iter().filter(|p| p.1 > 2.0 * base).map(|p| p.0).collect();
    let hi = per_l.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = per_l.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut by_depth = per_l.clone();
    by_depth.sort_by_key(|p| p.0);
    let ff_monotone = by_depth.windows(2).all(|w| w[1].2 > w[0].2);
    let xis: Vec<f64> = per_l.iter().filter_map(|p| p.4).collect();
    let mut checks = vec![
        check(
            "resnet_norm_stable",
            hi <= 2.0 * lo && flagged.is_empty(),
            format!("median ‖x^L‖ ranges over [{lo:.4}, {hi:.4}] (ratio {:.3}); flagged depths {flagged:?}", hi / lo),
        ),
        check(
            "feedforward_growth",
            ff_monotone,
            format!(
                "feedforward medians {:?}",
                by_depth.iter().map(|p| (p.0, p.2)).collect::<Vec<_>>()
            ),
        ),
    ];
    if !xis.is_empty() {
        checks.push(check(
            "xi_range",
            xis.iter().all(|x| (1.0..=3.0).contains(x)),
            format!("ξ(0) per depth {xis:?}, required in [1, 3]"),
        ));
    }
    let summary = json!({
        "m": m,
        "feedforward_gain": gain,
        "flagged_depths": flagged,
        "per_depth": per_l.iter().map(|p| json!({
            "L": p.0,
            "median_resnet_norm": p.1,
            "median_feedforward_norm": p.2,
            "median_lambda_min_k2": p.3,
            "xi": p.4,
        })).collect::<Vec<_>>(),
    });
    finish(spec, ctx, &table, checks, summary)
}

// ---------------------------------------------------------------- limit-gram

fn stack_checks(stack: &LimitKernelStack, check_stack: &LimitKernelStack, bound: &DiagonalBound, lam0: f64) -> LabResult<(Vec<Check>, Value)> {
    let depth = stack.depth();
    let n = stack.n();
    let mut checks = Vec::new();
    let k1 = stack.ktilde(1);
    let k1_dev = (0..n).map(|i| (k1.get(i, i) - 1.0).abs()).fold(0.0, f64::max);
    checks.push(check("k1_unit_diagonal", k1_dev <= 1e-8, format!("max |K̃¹_ii − 1| = {k1_dev:.3e}")));

    let mut b_ok = true;
    let mut b_margin = f64::INFINITY;
    let mut diag_spread: f64 = 0.0;
    let mut bounds_ok = true;
    let mut bounds = Vec::new();
    for l in 1..=depth {
        let k = stack.ktilde(l);
        let b = stack.btilde(l);
        let diag: Vec<f64> = (0..n).map(|i| k.get(i, i)).collect();
        for (i, &d) in diag.iter().enumerate() {
            b_ok &= b[i] * b[i] < d;
            b_margin = b_margin.min(d - b[i] * b[i]);
        }
        let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        diag_spread = diag_spread.max(hi - lo);
        let (blo, bhi) = bound.interval(l);
        bounds_ok &= blo <= lo && hi <= bhi;
        bounds.push(json!({ "l": l, "min_diag": lo, "max_diag": hi, "lower": blo, "upper": bhi }));
    }
    checks.push(check("b_below_diagonal", b_ok, format!("min over l, i of K̃_ii − b̃_i² = {b_margin:.3e}")));
    checks.push(check("diagonal_equal", diag_spread <= 1e-10, format!("largest diagonal spread {diag_spread:.3e}")));
    checks.push(check(
        "diagonal_interval",
        bounds_ok,
        format!("C = {:.6}, c = {:.6}; all diagonals inside the growth interval", bound.big_c, bound.c),
    ));
    let increasing = stack.hierarchy.windows(2).all(|w| w[1] > w[0]);
    checks.push(check("hierarchy_increasing", increasing, format!("{:?}", stack.hierarchy)));
    let lam_out = stack.k_l1.lambda_min()?;
    checks.push(check(
        "output_kernel_above_lambda0",
        lam_out > lam0 && lam0 > 0.0,
        format!("λ_min(K^[L+1]) = {lam_out:.6e}, λ₀ = {lam0:.6e}"),
    ));
    let quad = stack_difference(stack, check_stack);
    checks.push(check(
        "quadrature_converged",
        quad <= 1e-9,
        format!("{} vs {} nodes: max difference {quad:.3e}", stack.nodes, check_stack.nodes),
    ));
    let c = stack.c_res / depth as f64;
    let mut scaled = stack.k_l_unscaled.clone();
    scaled.scale(c * c);
    let fact = scaled.sub(&stack.k_l.matrix).max_abs();
    let kappa = GramMatrix::new(KernelKind::Limit, stack.k_l_unscaled.clone())?.lambda_min()?;
    let lam_kl = stack.k_l.lambda_min()?;
    checks.push(check(
        "last_layer_kernel_positive",
        lam_kl > 0.0 && fact <= 1e-15 * stack.k_l.matrix.max_abs(),
        format!("λ_min(K^[L]) = {lam_kl:.6e} = (c_res/L)² · {kappa:.6e}; factorization error {fact:.3e}"),
    ));
    let tables = json!({
        "ktilde": stack.ktilde.iter().map(|k| matrix_json(&k.matrix)).collect::<Vec<_>>(),
        "btilde": stack.btilde.iter().map(|b| b.to_vec()).collect::<Vec<_>>(),
        "k_l_plus_1": matrix_json(&stack.k_l1.matrix),
        "k_l": matrix_json(&stack.k_l.matrix),
        "lambda0": lam0,
        "hierarchy": stack.hierarchy,
        "lambda_min_k_l_plus_1": lam_out,
        "lambda_min_k_l": lam_kl,
        "kappa_hat": kappa,
        "diagonal_bound": { "C": bound.big_c, "c": bound.c, "per_layer": bounds },
        "quadrature_difference": quad,
        "nodes": [stack.nodes, check_stack.nodes],
    });
    Ok((checks, tables))
}

fn limit_gram(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let ds = spec.dataset()?;
    let cfg = spec.base_network()?;
    let depth = cfg.depth;
    let o = &spec.options;
    let build = |nodes: usize| build_limit_stack_with(&ds, cfg.activation, cfg.c_res, cfg.c_sigma, depth, nodes);
    let stack = build(o.nodes)?;
    let check_stack = build(o.check_nodes)?;
    let lam0 = lambda0(&stack)?;
    let bound = DiagonalBound::new(cfg.activation, cfg.c_res, cfg.c_sigma, depth);
    let (mut checks, tables) = stack_checks(&stack, &check_stack, &bound, lam0)?;

    let cells: Vec<(usize, u64, u64)> = o
        .concentration_m_list
        .iter()
        .flat_map(|&m| seed_pairs(spec).into_iter().map(move |(s, seed)| (m, s, seed)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(m, s, seed)| -> LabResult<_> {
            let c = spec.network(m, depth)?;
            concentration_row(&ds, &c, &stack, seed).map_err(LabError::at(format!("m = {m}, seed {s}")))
        })
        .collect::<LabResult<Vec<_>>>()?;
    let report = summarize_concentration(rows, lam0);
    let mut table = Table::new(&[
        "m",
        "seed",
        "init_seed",
        "gap_first",
        "gap_output",
        "gap_output_shifted",
        "lambda_min_output",
    ]);
    for (r, &(_, s, _)) in report.rows.iter().zip(&cells) {
        table.push(vec![
            r.m.into(),
            s.into(),
            r.seed.into(),
            r.gap_first.into(),
            r.gap_output.into(),
            r.gap_output_shifted.into(),
            r.lambda_min_output.into(),
        ]);
    }
    let top = report
        .summaries
        .iter()
        .max_by_key(|s| s.m)
        .expect("nonempty concentration grid");
    let tol = 5.0 / (top.m as f64).sqrt();
    checks.push(check(
        "concentration_gap",
        top.max_gap_output <= tol,
        format!("m = {}: max |G^[L+1](0) − K̃^[L]| = {:.4e} ≤ 5/√m = {tol:.4e}", top.m, top.max_gap_output),
    ));
    let need = (9 * top.seeds).div_ceil(10);
    checks.push(check(
        "concentration_lambda",
        top.lambda_ok >= need,
        format!(
            "m = {}: λ_min(G^[L+1](0)) ≥ 3λ₀/4 in {}/{} seeds (need {need}); min {:.4e}, 3λ₀/4 = {:.4e}",
            top.m,
            top.lambda_ok,
            top.seeds,
            top.min_lambda_output,
            0.75 * lam0
        ),
    ));
    if report.summaries.len() >= 2 {
        checks.push(check(
            "concentration_slope",
            (-0.65..=-0.35).contains(&report.gap_slope),
            format!("mean-gap log-log slope {:.4}, required in [-0.65, -0.35]", report.gap_slope),
        ));
    }
    let summaries: Vec<Value> = report
        .summaries
        .iter()
        .map(|s| {
            json!({
                "m": s.m,
                "seeds": s.seeds,
                "max_gap_output": s.max_gap_output,
                "mean_gap_output": s.mean_gap_output,
                "median_gap_output": s.median_gap_output,
                "max_gap_first": s.max_gap_first,
                "median_gap_output_shifted": s.median_gap_output_shifted,
                "min_lambda_output": s.min_lambda_output,
                "median_lambda_output": s.median_lambda_output,
                "lambda_ok": s.lambda_ok,
            })
        })
        .collect();

    let mc = if o.replicates > 0 {
        let layer = o.mc_layer.unwrap_or(depth);
        let probe = spec.network(o.m_probe, depth)?;
        let first = spec.init_seed(spec.seeds[0]);
        let reps = (0..o.replicates as u64)
            .into_par_iter()
            .map(|r| {
                mc_replicate(&ds, &probe, &stack, layer, first.wrapping_add(r))
                    .map_err(LabError::at(format!("Monte-Carlo replicate {r}")))
            })
            .collect::<LabResult<Vec<_>>>()?;
        let est = McKernel::from_replicates(layer, o.m_probe, &reps)?;
        let z = (layer == depth).then(|| est.max_z(&stack.k_l.matrix));
        if let Some(z) = z {
            checks.push(check(
                "mc_matches_closed_form",
                z <= 3.0,
                format!(
                    "layer {layer}, m_probe {}, {} replicates: max |estimate − K^[L]| / SE = {z:.3}",
                    o.m_probe, o.replicates
                ),
            ));
        }
        json!({
            "layer": layer,
            "m_probe": o.m_probe,
            "replicates": o.replicates,
            "first_seed": first,
            "estimate": matrix_json(&est.mean.matrix),
            "stderr": matrix_json(&est.stderr),
            "max_z_vs_closed_form": z,
        })
    } else {
        Value::Null
    };
    let summary = json!({
        "stack": tables,
        "concentration": {
            "lambda0": lam0,
            "gap_slope": report.gap_slope,
            "per_width": summaries,
        },
        "monte_carlo": mc,
    });
    finish(spec, ctx, &table, checks, summary)
}

// ----------------------------------------------------------------- nth-check

/// Integrates from `params` over `span ≥ 0` in equal steps no longer than `step`.
fn advance(cfg: &NetworkConfig, params: Params, ds: &Dataset, span: f64, step: f64, scheme: nth_lab_core::dynamics::Scheme) -> nth_lab_core::Result<Params> {
    if span <= 0.0 {
        return Ok(params);
    }
    let steps = (span / step - 1e-9).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let mut p = params;
    for _ in 0..steps {
        p = integrate(cfg, &p, ds, h, scheme)?.0;
    }
    Ok(p)
}

struct NthRow {
    seed: u64,
    t: f64,
    delta: f64,
    max_abs: f64,
    drift_rate: f64,
    relative: f64,
    k2_relative: f64,
    g3_rate: f64,
}

fn nth_check(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let cfg = spec.base_network()?;
    let ds = spec.dataset()?;
    let o = &spec.options;
    let scheme = spec.scheme.into();
    let times: Vec<f64> = (0..o.time_points)
        .map(|k| k as f64 * spec.horizon / o.time_points as f64)
        .collect();
    let deltas = [o.delta, o.delta / 2.0];
    let pairs = seed_pairs(spec);
    let per_seed = pairs
        .par_iter()
        .map(|&(s, seed)| -> LabResult<Vec<NthRow>> {
            let mut rows = Vec::new();
            let mut p = init_params(&cfg, seed);
            let mut t_cur = 0.0;
            for &t in &times {
                let at = || LabError::at(format!("seed {s}, t = {t}"));
                p = advance(&cfg, p, &ds, t - t_cur, spec.step, scheme).map_err(at())?;
                t_cur = t;
                let grads = sample_grads(&cfg, &p, &ds).map_err(at())?;
                let g3 = g3_kernel(&cfg, &p, &grads);
                let r: Vec<f64> = grads.iter().zip(&ds.labels).map(|(g, y)| g.f - y).collect();
                for &delta in &deltas {
                    let back = integrate(&cfg, &p, &ds, -delta / 2.0, scheme).map_err(at())?.0;
                    let fwd = integrate(&cfg, &p, &ds, delta / 2.0, scheme).map_err(at())?.0;
                    let gb = output_gram(&cfg, &back, &ds).map_err(at())?;
                    let gf = output_gram(&cfg, &fwd, &ds).map_err(at())?;
                    let res = nth_residual(&gb, &gf, delta, &g3, &r).map_err(at())?;
                    let kb = empirical_ntk(&cfg, &back, &ds).map_err(at())?.k2;
                    let kf = empirical_ntk(&cfg, &fwd, &ds).map_err(at())?.k2;
                    let k2res = nth_residual(&kb, &kf, delta, &g3, &r).map_err(at())?;
                    let g3b = g3_kernel(&cfg, &back, &sample_grads(&cfg, &back, &ds).map_err(at())?);
                    let g3f = g3_kernel(&cfg, &fwd, &sample_grads(&cfg, &fwd, &ds).map_err(at())?);
                    let g3_rate = g3f
                        .data
                        .iter()
                        .zip(&g3b.data)
                        .map(|(a, b)| (a - b).abs() / delta)
                        .fold(0.0, f64::max);
                    rows.push(NthRow {
                        seed: s,
                        t,
                        delta,
                        max_abs: res.max_abs,
                        drift_rate: res.drift_rate,
                        relative: res.relative,
                        k2_relative: k2res.relative,
                        g3_rate,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<LabResult<Vec<_>>>()?;
    let rows: Vec<NthRow> = per_seed.into_iter().flatten().collect();
    let mut table = Table::new(&[
        "seed",
        "t",
        "delta",
        "max_abs",
        "drift_rate",
        "relative",
        "k2_relative",
        "g3_drift_rate",
    ]);
    for r in &rows {
        table.push(vec![
            r.seed.into(),
            r.t.into(),
            r.delta.into(),
            r.max_abs.into(),
            r.drift_rate.into(),
            r.relative.into(),
            r.k2_relative.into(),
            r.g3_rate.into(),
        ]);
    }
    let worst_rel = rows
        .iter()
        .filter(|r| r.delta == o.delta)
        .map(|r| r.relative)
        .fold(0.0, f64::max);
    let shrink: Vec<f64> = rows.chunks(2).map(|w| w[0].max_abs / w[1].max_abs).collect();
    let min_shrink = shrink.iter().copied().fold(f64::INFINITY, f64::min);
    let checks = vec![
        check(
            "relative_residual",
            worst_rel <= NTH_TOL,
            format!("worst relative residual {worst_rel:.3e} at δ = {} (tolerance {NTH_TOL:e})", o.delta),
        ),
        check(
            "halving_shrinks",
            min_shrink >= 2.0,
            format!("smallest residual ratio r(δ)/r(δ/2) = {min_shrink:.3}"),
        ),
    ];
    let summary = json!({
        "kernel": "output-layer Gram G^[L+1]",
        "times": times,
        "deltas": deltas,
        "worst_relative": worst_rel,
        "shrink_ratios": shrink,
        "worst_k2_relative": rows.iter().map(|r| r.k2_relative).fold(0.0, f64::max),
    });
    finish(spec, ctx, &table, checks, summary)
}

// --------------------------------------------------------- kernel-regression

struct RegressionCell {
    m: usize,
    seed: u64,
    rows: Vec<(f64, f64, f64, f64)>,
    sup_gap: f64,
    lambda0_k2: f64,
}

fn kernel_regression(spec: &ExperimentSpec, ctx: &Context) -> LabResult<Report> {
    let ds = spec.dataset()?;
    let n = ds.n();
    let opts = flow_options(spec);
    let m_list = spec.m_list(ctx.heavy);
    let cells: Vec<(usize, u64, u64)> = m_list
        .iter()
        .flat_map(|&m| seed_pairs(spec).into_iter().map(move |(s, seed)| (m, s, seed)))
        .collect();
    let out = cells
        .par_iter()
        .map(|&(m, s, seed)| -> LabResult<RegressionCell> {
            let name = format!("m = {m}, seed {s}");
            let cfg = spec.network(m, spec.config.depth)?;
            let tr = run_flow(&cfg, init_params(&cfg, seed), &ds, &opts).map_err(LabError::at(name.clone()))?;
            let tr = completed(tr, &name)?;
            let r0 = &tr.points[0].residuals;
            let mut rows = Vec::with_capacity(tr.points.len());
            for p in &tr.points {
                let pred = kernel_regression_predict(&tr.k0, r0, p.t, n).map_err(LabError::at(name.clone()))?;
                let gap = p.residuals.iter().zip(pred.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                rows.push((p.t, gap, p.loss, loss_from_residuals(&pred)));
            }
            Ok(RegressionCell {
                m,
                seed: s,
                sup_gap: rows.iter().map(|r| r.1).fold(0.0, f64::max),
                rows,
                lambda0_k2: tr.points[0].lambda_min,
            })
        })
        .collect::<LabResult<Vec<_>>>()?;

    let mut table = Table::new(&["m", "seed", "t", "gap_inf", "loss", "predicted_loss"]);
    for c in &out {
        for &(t, gap, loss, pred) in &c.rows {
            table.push(vec![c.m.into(), c.seed.into(), t.into(), gap.into(), loss.into(), pred.into()]);
        }
    }
    let gap0 = out.iter().map(|c| c.rows[0].1).fold(0.0, f64::max);
    let xs: Vec<f64> = m_list.iter().map(|&m| m as f64).collect();
    let values: Vec<Vec<f64>> = m_list
        .iter()
        .map(|&m| out.iter().filter(|c| c.m == m).map(|c| c.sup_gap).collect())
        .collect();
    let fit = bootstrap_slope(&xs, &values, spec.options.bootstrap, spec.base_seed.wrapping_add(BOOTSTRAP_MIX));

    // λI has the closed form exp(−λt/n) r0
    let lam = out[0].lambda0_k2;
    let r0: Vec<f64> = ds.labels.iter().enumerate().map(|(i, y)| 0.25 * (i as f64 + 1.0) - y).collect();
    let mut eye = Matrix::identity(n);
    eye.scale(lam);
    let k = GramMatrix::new(KernelKind::EmpiricalK2, eye)?;
    let mut sanity: f64 = 0.0;
    for c in &out[0].rows {
        let pred = kernel_regression_predict(&k, &r0, c.0, n)?;
        let decay = (-lam * c.0 / n as f64).exp();
        for (p, r) in pred.iter().zip(&r0) {
            sanity = sanity.max((p - decay * r).abs() / (decay * r.abs()).max(f64::MIN_POSITIVE));
        }
    }
    let checks = vec![
        check("gap_at_zero", gap0 == 0.0, format!("max gap at t = 0: {gap0:e}")),
        check(
            "gap_shrinks_with_width",
            fit.slope < 0.0,
            format!("sup-gap log-log slope {:.3} (95% CI [{:.3}, {:.3}])", fit.slope, fit.lo, fit.hi),
        ),
        check(
            "identity_kernel",
            sanity <= 1e-12,
            format!("λI prediction vs exp(−λt/n) r0: max relative error {sanity:.3e}"),
        ),
    ];
    let mean_gap: Vec<f64> = values.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let summary = json!({
        "m_list": m_list,
        "mean_sup_gap": mean_gap,
        "sup_gap_slope": slope_json(&fit),
        "sup_gap_slope_of_means": log_log_slope(&xs, &mean_gap),
        "identity_kernel_error": sanity,
    });
    finish(spec, ctx, &table, checks, summary)
}
