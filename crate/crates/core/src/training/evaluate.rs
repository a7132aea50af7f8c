//! Test-set evaluation for forecasting, projection and downscaling.
//! Predictions are denormalized before any metric is computed.

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::grid::{Dataset, NormStats};
use crate::metrics::{
    acc, climatology, lat_mse, lat_rmse, lat_weights, mean_bias, nrmse_global, nrmse_spatial, pearson, trmse,
    MetricReport, TRMSE_ALPHA,
};
use crate::model::{forward, projection_forward, ForwardRequest, LeadTime, ModelConfig, TokenWindow};
use crate::tensor::{ParamStore, Tensor};

use super::data::{all_pairs, lead_steps, make_batch, Pair};
use super::rollout::rollout;

const EVAL_BATCH: usize = 16;

/// How a forecast at a given lead is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForecastMethod {
    /// One forward pass conditioned on the lead time.
    Direct,
    /// Repeated forward passes of `step_hours` each.
    Rollout { step_hours: u32 },
}

/// Variables of `[N, V, H, W]` values as `[V][N·H·W]`, denormalized when
/// statistics are present.
fn per_variable(values: &[f32], vars: &[String], cells: usize, norm: Option<&NormStats>) -> Result<Vec<Vec<f64>>> {
    let nv = vars.len();
    let mut out = vec![Vec::with_capacity(values.len() / nv.max(1)); nv];
    let stats = norm.map(|n| n.for_variables(vars)).transpose()?;
    for (k, field) in values.chunks_exact(cells).enumerate() {
        let v = k % nv;
        let (m, s) = stats.as_ref().map_or((0.0, 1.0), |st| (st[v].mean, st[v].std));
        out[v].extend(field.iter().map(|&x| x as f64 * s + m));
    }
    Ok(out)
}

/// Predictions for `pairs` in normalized space, `[N, V', H, W]` flattened.
#[allow(clippy::too_many_arguments)]
pub fn predict_pairs(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    ds: &Dataset,
    pairs: &[Pair],
    inputs: &[String],
    targets: &[String],
    window: Option<TokenWindow>,
    method: ForecastMethod,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for chunk in pairs.chunks(EVAL_BATCH) {
        let batch = make_batch(ds, chunk, inputs, targets, None)?;
        truth.extend_from_slice(batch.target.data());
        match method {
            ForecastMethod::Direct => {
                let mut g = Graph::<f32>::new(Mode::Eval, 0);
                let out = forward(
                    &mut g,
                    cfg,
                    params,
                    &ForwardRequest {
                        input: &batch.input,
                        input_vars: inputs,
                        targets,
                        lead: batch.lead.clone(),
                        window,
                    },
                )?;
                pred.extend_from_slice(g.value(out.prediction));
            }
            ForecastMethod::Rollout { step_hours } => {
                if window.is_some() {
                    return Err(Error::invalid("rollout evaluation runs on the full grid"));
                }
                let hours = chunk[0].lead_steps as i64 * ds.time.step_hours;
                let r = rollout(cfg, params, &batch.input, inputs, &ds.static_variables, hours as u32, step_hours)?;
                let last = r.trajectory.last().expect("at least one step");
                let idx: Vec<usize> = targets
                    .iter()
                    .map(|t| {
                        r.variables
                            .iter()
                            .position(|v| v == t)
                            .ok_or_else(|| Error::invalid(format!("rollout does not predict `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                let cells = ds.grid.cells();
                for b in 0..chunk.len() {
                    for &v in &idx {
                        let off = (b * r.variables.len() + v) * cells;
                        pred.extend_from_slice(&last.data()[off..off + cells]);
                    }
                }
            }
        }
    }
    Ok((pred, truth))
}

/// RMSE, ACC and lat-MSE per target variable and lead on the test series.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_forecast(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    test: &Dataset,
    inputs: &[String],
    targets: &[String],
    leads: &[u32],
    window: Option<TokenWindow>,
    method: ForecastMethod,
    task: &str,
) -> Result<MetricReport> {
    let weights = lat_weights(&test.grid)?;
    let width = test.grid.width();
    let cells = test.grid.cells();
    let mut report = MetricReport::default();
    for &lead in leads {
        lead_steps(test, lead)?;
        let pairs = all_pairs(test, lead)?;
        if pairs.is_empty() {
            return Err(Error::invalid(format!("test series too short for a {lead} h lead")));
        }
        let (pred, truth) = predict_pairs(cfg, params, test, &pairs, inputs, targets, window, method)?;
        let pred = per_variable(&pred, targets, cells, test.norm.as_ref())?;
        let truth = per_variable(&truth, targets, cells, test.norm.as_ref())?;
        for (v, name) in targets.iter().enumerate() {
            let clim = climatology(&truth[v], cells)?;
            report.push(task, name, Some(lead), "rmse", lat_rmse(&pred[v], &truth[v], &weights, width)?);
            report.push(task, name, Some(lead), "lat_mse", lat_mse(&pred[v], &truth[v], &weights, width)?);
            match acc(&pred[v], &truth[v], &clim, &weights, width) {
                Ok(a) => report.push(task, name, Some(lead), "acc", a),
                Err(e) => log::warn!("acc undefined for {name} at {lead} h: {e}"),
            }
        }
    }
    Ok(report)
}

/// Forcing-history windows for a projection task.
#[derive(Clone, Debug)]
pub struct ProjectionTask {
    /// Normalized forcing series, one step per year.
    pub forcing: Dataset,
    /// Normalized response series on the same years.
    pub response: Dataset,
    pub history: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProjectionTask {
    /// `[B, T, V, H, W]` forcing histories ending at each year, with targets.
    pub fn batch(&self, years: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (h, w) = (self.forcing.grid.height(), self.forcing.grid.width());
        let (nv, nt) = (self.forcing.num_vars(), self.response.num_vars());
        let mut x = Vec::with_capacity(years.len() * self.history * nv * h * w);
        let mut y = Vec::with_capacity(years.len() * nt * h * w);
        for &yr in years {
            if yr + 1 < self.history || yr >= self.forcing.len() {
                return Err(Error::invalid(format!("year {yr} lacks a {}-year history", self.history)));
            }
            for k in yr + 1 - self.history..=yr {
                x.extend_from_slice(self.forcing.frame(k));
            }
            y.extend_from_slice(self.response.frame(yr));
        }
        Ok((
            Tensor::new(vec![years.len(), self.history, nv, h, w], x)?,
            Tensor::new(vec![years.len(), nt, h, w], y)?,
        ))
    }
}

/// NRMSE_s, NRMSE_g, TRMSE and RMSE per target on the test years.
pub fn evaluate_projection(cfg: &ModelConfig, params: &ParamStore<f32>, task: &ProjectionTask) -> Result<MetricReport> {
    let targets = &task.response.variables;
    let grid = &task.response.grid;
    let (weights, width, cells) = (lat_weights(grid)?, grid.width(), grid.cells());
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for chunk in task.test.chunks(EVAL_BATCH) {
        let (x, y) = task.batch(chunk)?;
        let mut g = Graph::<f32>::new(Mode::Eval, 0);
        let out = projection_forward(&mut g, cfg, params, &x)?;
        pred.extend_from_slice(g.value(out));
        truth.extend_from_slice(y.data());
    }
    let pred = per_variable(&pred, targets, cells, task.response.norm.as_ref())?;
    let truth = per_variable(&truth, targets, cells, task.response.norm.as_ref())?;
    let mut report = MetricReport::default();
    for (v, name) in targets.iter().enumerate() {
        let s = nrmse_spatial(&pred[v], &truth[v], &weights, width)?;
        let g = nrmse_global(&pred[v], &truth[v], &weights, width)?;
        report.push("projection", name, None, "nrmse_s", s);
        report.push("projection", name, None, "nrmse_g", g);
        report.push("projection", name, None, "trmse", trmse(s, g, TRMSE_ALPHA));
        report.push("projection", name, None, "rmse", lat_rmse(&pred[v], &truth[v], &weights, width)?);
    }
    Ok(report)
}

/// Upsampled coarse inputs paired with fine targets at equal times.
#[derive(Clone, Debug)]
pub struct DownscaleSplit {
    /// Normalized inputs already interpolated onto the fine grid.
    pub input: Dataset,
    /// Normalized fine-grid targets.
    pub target: Dataset,
}

impl DownscaleSplit {
    pub fn batch(&self, times: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (h, w) = (self.target.grid.height(), self.target.grid.width());
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &t in times {
            x.extend_from_slice(self.input.frame(t));
            y.extend_from_slice(self.target.frame(t));
        }
        Ok((
            Tensor::new(vec![times.len(), self.input.num_vars(), h, w], x)?,
            Tensor::new(vec![times.len(), self.target.num_vars(), h, w], y)?,
        ))
    }
}

/// RMSE, Pearson and mean bias per target.
pub fn evaluate_downscale(cfg: &ModelConfig, params: &ParamStore<f32>, split: &DownscaleSplit) -> Result<MetricReport> {
    let targets = &split.target.variables;
    let grid = &split.target.grid;
    let (weights, width, cells) = (lat_weights(grid)?, grid.width(), grid.cells());
    let times: Vec<usize> = (0..split.target.len()).collect();
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for chunk in times.chunks(EVAL_BATCH) {
        let (x, y) = split.batch(chunk)?;
        let mut g = Graph::<f32>::new(Mode::Eval, 0);
        let out = forward(
            &mut g,
            cfg,
            params,
            &ForwardRequest {
                input: &x,
                input_vars: &split.input.variables,
                targets,
                lead: LeadTime::Fixed,
                window: None,
            },
        )?;
        pred.extend_from_slice(g.value(out.prediction));
        truth.extend_from_slice(y.data());
    }
    let pred = per_variable(&pred, targets, cells, split.target.norm.as_ref())?;
    let truth = per_variable(&truth, targets, cells, split.target.norm.as_ref())?;
    let mut report = MetricReport::default();
    for (v, name) in targets.iter().enumerate() {
        report.push("downscale", name, None, "rmse", lat_rmse(&pred[v], &truth[v], &weights, width)?);
        report.push("downscale", name, None, "pearson", pearson(&pred[v], &truth[v])?);
        report.push("downscale", name, None, "mean_bias", mean_bias(&pred[v], &truth[v])?);
    }
    Ok(report)
}
