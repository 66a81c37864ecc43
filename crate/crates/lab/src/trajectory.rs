//! Gradient-flow runs with the measured quantities recorded along the way.

use nth_lab_core::dynamics::{
    accumulate_batch, flow_step, loss_from_residuals, sample_grads, spectral_diag, FlowState, GradTheta, Scheme,
};
use nth_lab_core::kernel::{output_gram_from_layers, snapshot_from_grads, GramMatrix};
use nth_lab_core::{Dataset, NetworkConfig, Params};
use serde::Serialize;

use crate::output::{Cell, Table};

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub horizon: f64,
    /// Upper bound on the step; the actual step divides `horizon` evenly.
    pub step: f64,
    pub scheme: Scheme,
    pub record_every: usize,
    /// Compute ξ and ω every k-th record (always at `t = 0`); 0 disables.
    pub xi_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub loss: f64,
    pub lambda_min: f64,
    /// `‖∇R_S‖² / R_S = −(d/dt) ln R_S`; zero at zero loss.
    pub rate: f64,
    /// `max |K2(t) − K2(0)|`
    pub kernel_drift_inf: f64,
    pub kernel_drift_fro: f64,
    /// `max |G^[L+1](t) − G^[L+1](0)|`
    pub output_drift_inf: f64,
    /// `‖θ_t − θ_0‖_F / √m`
    pub param_drift: f64,
    pub xi: Option<f64>,
    pub omega: Option<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Loss after every integration step, starting with `R_S(θ_0)`.
    pub step_losses: Vec<f64>,
    pub step: f64,
    pub k0: GramMatrix,
    pub params: Params,
    /// Set when integration stopped early: where, and why.
    pub failure: Option<(String, nth_lab_core::Error)>,
    /// Time of `params`.
    pub t_final: f64,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn lambda_hat(&self) -> f64 {
        self.points.iter().map(|p| p.lambda_min).fold(f64::INFINITY, f64::min)
    }

    pub fn sup<F: Fn(&TrajectoryPoint) -> f64>(&self, f: F) -> f64 {
        self.points.iter().map(f).fold(0.0, f64::max)
    }

    /// Largest increase of the loss across one step.
    pub fn max_loss_increase(&self) -> f64 {
        self.step_losses.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&[
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
        let opt = |v: Option<f64>| Cell::F(v.unwrap_or(f64::NAN));
        for p in &self.points {
            t.push(vec![
                p.t.into(),
                p.loss.into(),
                p.lambda_min.into(),
                p.rate.into(),
                p.kernel_drift_inf.into(),
                p.kernel_drift_fro.into(),
                p.output_drift_inf.into(),
                p.param_drift.into(),
                opt(p.xi),
                opt(p.omega),
            ]);
        }
        t
    }
}

struct Recorder<'a> {
    config: &'a NetworkConfig,
    dataset: &'a Dataset,
    theta0: Params,
    k0: Option<GramMatrix>,
    g0: Option<GramMatrix>,
    xi_every: usize,
    records: usize,
}

impl Recorder<'_> {
    fn record(&mut self, t: f64, params: &Params) -> nth_lab_core::Result<TrajectoryPoint> {
        let grads = sample_grads(self.config, params, self.dataset)?;
        let snap = snapshot_from_grads(t, &grads, false)?;
        let outs: Vec<_> = grads.iter().map(|g| g.cache.output_layer().clone()).collect();
        let g_out = output_gram_from_layers(&outs, self.config.depth)?;
        // the dense gradient, summed independently of the Gram matrix
        let n = self.dataset.n() as f64;
        let mut gradient = GradTheta::zeros(self.config);
        let residuals: Vec<f64> = grads.iter().zip(&self.dataset.labels).map(|(g, y)| g.f - y).collect();
        let alphas: Vec<f64> = residuals.iter().map(|r| r / n).collect();
        accumulate_batch(&grads, &alphas, &mut gradient);
        let loss = loss_from_residuals(&residuals);
        let rate = if loss > 0.0 {
            gradient.dot(&gradient) / loss
        } else {
            0.0
        };
        let k0 = self.k0.get_or_insert_with(|| snap.k2.clone());
        let g0 = self.g0.get_or_insert_with(|| g_out.clone());
        let dk = snap.k2.matrix.sub(&k0.matrix);
        let (xi, omega) = if self.xi_every > 0 && self.records.is_multiple_of(self.xi_every) {
            let s = spectral_diag(self.config, params)?;
            (Some(s.xi), Some(s.omega))
        } else {
            (None, None)
        };
        self.records += 1;
        Ok(TrajectoryPoint {
            t,
            loss,
            lambda_min: snap.lambda_min,
            rate,
            kernel_drift_inf: dk.max_abs(),
            kernel_drift_fro: dk.frobenius_norm(),
            output_drift_inf: g_out.max_abs_diff(g0),
            param_drift: params.distance(&self.theta0) / (self.config.m as f64).sqrt(),
            xi,
            omega,
            residuals,
        })
    }
}

/// Integrates `θ̇ = −∇R_S(θ)` from `params` to `horizon`, recording every
/// `record_every` steps and at the final time.
pub fn run_flow(config: &NetworkConfig, params: Params, dataset: &Dataset, opts: &FlowOptions) -> nth_lab_core::Result<Trajectory> {
    let steps = (opts.horizon / opts.step - 1e-9).ceil().max(1.0) as usize;
    let h = opts.horizon / steps as f64;
    let mut rec = Recorder {
        config,
        dataset,
        theta0: params.clone(),
        k0: None,
        g0: None,
        xi_every: opts.xi_every,
        records: 0,
    };
    let first = rec.record(0.0, &params)?;
    let mut step_losses = vec![first.loss];
    let mut points = vec![first];
    let mut state = FlowState::new(params, h, opts.scheme)?;
    let mut failure = None;
    for k in 1..=steps {
        match flow_step(&state, config, dataset) {
            Ok(out) => {
                step_losses.push(out.loss_after);
                state = out.state;
                // accumulated t drifts by rounding; use the exact grid time
                state.t = k as f64 * h;
            }
            Err(e) => {
                failure = Some((format!("step {k} from t = {}", state.t), e));
                break;
            }
        }
        if k % opts.record_every == 0 || k == steps {
            match rec.record(state.t, &state.params) {
                Ok(p) => points.push(p),
                Err(e) => {
                    failure = Some((format!("recording at t = {}", state.t), e));
                    break;
                }
            }
        }
    }
    Ok(Trajectory {
        points,
        step_losses,
        step: h,
        k0: rec.k0.expect("initial record"),
        t_final: state.t,
        params: state.params,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nth_lab_core::model::{init_params, network_output};
    use nth_lab_core::{model::forward, Activation};

    fn small() -> (NetworkConfig, Params, Dataset) {
        let c = NetworkConfig::new(4, 32, 3, 0.5, Activation::Softplus).unwrap();
        let p = init_params(&c, 1);
        (c, p, Dataset::generate(5, 4, 2).unwrap())
    }

    #[test]
    fn records_grid_and_monotone_loss() {
        let (c, p, ds) = small();
        let opts = FlowOptions {
            horizon: 1.0,
            step: 0.3,
            scheme: Scheme::Rk4,
            record_every: 2,
            xi_every: 1,
        };
        let tr = run_flow(&c, p, &ds, &opts).unwrap();
        assert!(tr.failure.is_none());
        assert_eq!(tr.step_losses.len(), 5);
        assert!((tr.step - 0.25).abs() < 1e-15);
        assert_eq!(tr.times(), vec![0.0, 0.5, 1.0]);
        assert!(tr.max_loss_increase() <= 0.0);
        assert_eq!(tr.points[0].kernel_drift_inf, 0.0);
        assert_eq!(tr.points[0].param_drift, 0.0);
        assert!(tr.points[2].param_drift > 0.0);
        for p in &tr.points {
            assert!(p.rate >= 2.0 * p.lambda_min / 5.0 - 1e-9);
            assert!(p.xi.unwrap() >= 1.0);
        }
    }

    #[test]
    fn zero_residual_start_stays_at_zero() {
        let (c, p, ds) = small();
        let labels = ds
            .inputs
            .iter()
            .map(|x| network_output(&forward(&c, &p, x).unwrap(), &p))
            .collect();
        let ds = ds.relabel(labels).unwrap();
        let opts = FlowOptions {
            horizon: 0.5,
            step: 0.1,
            scheme: Scheme::Rk4,
            record_every: 1,
            xi_every: 0,
        };
        let tr = run_flow(&c, p, &ds, &opts).unwrap();
        for p in &tr.points {
            assert!(p.loss < 1e-28, "{}", p.loss);
        }
    }
}
