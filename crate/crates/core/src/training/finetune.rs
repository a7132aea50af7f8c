//! Finetuning protocols: direct, all-variable, continuous-lead, iterative,
//! regional, projection (frozen or full) and downscaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{lead_lattice, make_batch, sample_pair, validation_pairs, Pair, MAX_LEAD_HOURS, MIN_LEAD_HOURS};
use super::evaluate::{
    evaluate_downscale, evaluate_forecast, evaluate_projection, predict_pairs, DownscaleSplit, ForecastMethod,
    ProjectionTask,
};
use super::fit::{fit, FitConfig, FitOutcome};
use super::optim::OptimConfig;
use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::grid::crop::crop_dataset_indices;
use crate::grid::synth::ProjectionData;
use crate::grid::{compute_norm_stats, crop_indices, normalize, regrid_dataset, Dataset, Region};
use crate::metrics::{lat_mse, lat_mse_loss, lat_weights, mse_loss, MetricReport};
use crate::model::climax::is_layer_norm;
use crate::model::posembed::retarget_grid;
use crate::model::{
    add_projection_head, add_variables, forward, projection_forward, ForwardRequest, LeadTime, ModelConfig,
    TokenWindow,
};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    Direct,
    AllVars,
    Continuous,
    Iterative,
    ProjectionFrozen,
    ProjectionFull,
    Regional,
    Downscale,
}

impl ProtocolMode {
    /// Base learning rate of the task family, before the
    /// desk-scale multiplier.
    pub fn base_lr(self) -> f64 {
        match self {
            ProtocolMode::ProjectionFrozen | ProtocolMode::ProjectionFull => 5e-4,
            ProtocolMode::Downscale => 5e-5,
            _ => 5e-7,
        }
    }

    pub fn is_forecast(self) -> bool {
        !matches!(
            self,
            ProtocolMode::ProjectionFrozen | ProtocolMode::ProjectionFull | ProtocolMode::Downscale
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    /// Empty means every dynamic variable.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "default_lead")]
    pub lead_hours: u32,
    /// Training lead range of continuous mode.
    #[serde(default = "default_lead_range")]
    pub lead_range: (u32, u32),
    #[serde(default = "default_rollout_step")]
    pub rollout_step_hours: u32,
    /// Leads reported at evaluation; empty means `[lead_hours]`.
    #[serde(default)]
    pub eval_leads: Vec<u32>,
    #[serde(default)]
    pub region: Option<Region>,
    /// Forcing years per projection sample.
    #[serde(default = "default_history")]
    pub history: usize,
}

fn default_lead() -> u32 {
    72
}
fn default_lead_range() -> (u32, u32) {
    (MIN_LEAD_HOURS, MAX_LEAD_HOURS)
}
fn default_rollout_step() -> u32 {
    6
}
fn default_history() -> usize {
    10
}

impl ProtocolSpec {
    pub fn new(mode: ProtocolMode) -> Self {
        ProtocolSpec {
            mode,
            targets: Vec::new(),
            lead_hours: default_lead(),
            lead_range: default_lead_range(),
            rollout_step_hours: default_rollout_step(),
            eval_leads: Vec::new(),
            region: None,
            history: default_history(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ProtocolMode::Direct if self.targets.len() != 1 => {
                Err(Error::invalid("direct mode trains exactly one target variable"))
            }
            ProtocolMode::Iterative if !self.targets.is_empty() => Err(Error::invalid(
                "iterative mode must predict every input variable; leave targets empty",
            )),
            ProtocolMode::Regional if self.region.is_none() => Err(Error::invalid("regional mode needs a region")),
            ProtocolMode::Continuous if self.lead_range.0 == 0 || self.lead_range.0 > self.lead_range.1 => {
                Err(Error::invalid("continuous mode needs a lead range min ≤ max, min > 0"))
            }
            _ if self.lead_hours == 0 || self.rollout_step_hours == 0 || self.history == 0 => {
                Err(Error::invalid("lead, rollout step and history must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn eval_leads(&self) -> Vec<u32> {
        if self.eval_leads.is_empty() {
            vec![self.lead_hours]
        } else {
            self.eval_leads.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub fit: FitConfig,
    pub optim: OptimConfig,
    /// Multiplier on the task family's base learning rate.
    pub lr_scale: f64,
    /// Overrides the scaled base rate when set.
    pub peak_lr: Option<f64>,
    pub val_pairs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            fit: FitConfig::default(),
            optim: OptimConfig::finetune(0.0),
            lr_scale: 100.0,
            peak_lr: None,
            val_pairs: 32,
        }
    }
}

impl FinetuneConfig {
    pub fn optim_for(&self, mode: ProtocolMode) -> OptimConfig {
        OptimConfig {
            peak_lr: self.peak_lr.unwrap_or(mode.base_lr() * self.lr_scale),
            total_steps: self.optim.total_steps.max(self.fit.steps),
            warmup_steps: self.optim.warmup_steps.min(self.fit.steps),
            ..self.optim.clone()
        }
    }
}

/// Normalized train/validation/test series sharing training-split statistics.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn from_dataset(ds: &Dataset, fractions: [f64; 3]) -> Result<Splits> {
        let parts = ds.split(&fractions)?;
        let stats = compute_norm_stats(&parts[0])?;
        let mut parts = parts
            .into_iter()
            .map(|mut p| -> Result<Dataset> {
                normalize(&mut p, &stats)?;
                p.norm = Some(stats.clone());
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || parts.next().expect("three parts");
        Ok(Splits {
            train: next(),
            val: next(),
            test: next(),
        })
    }

    fn map(&self, f: impl Fn(&Dataset) -> Result<Dataset>) -> Result<Splits> {
        Ok(Splits {
            train: f(&self.train)?,
            val: f(&self.val)?,
            test: f(&self.test)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub config: ModelConfig,
    pub fit: FitOutcome,
    pub report: MetricReport,
}

/// Registers unseen data variables in the model.
fn adopt_variables(cfg: &mut ModelConfig, params: &mut ParamStore<f32>, names: &[String], seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7776_6172);
    let added = add_variables(cfg, params, names, &mut rng)?;
    if !added.is_empty() {
        log::info!("initialized embeddings for unseen variables {added:?}");
    }
    Ok(added)
}

/// Token window of a patch-aligned crop.
fn crop_window(cfg: &ModelConfig, grid: &crate::grid::GridSpec, region: &Region) -> Result<(TokenWindow, crate::grid::CropIndices)> {
    let idx = crop_indices(grid, region)?;
    let p = cfg.patch_size;
    let w = grid.width();
    let rows_ok = idx.rows.windows(2).all(|r| r[1] == r[0] + 1);
    let cols_ok = idx.cols.windows(2).all(|c| c[1] == (c[0] + 1) % w);
    if !rows_ok || !cols_ok || idx.rows[0] % p != 0 || idx.cols[0] % p != 0 || idx.rows.len() % p != 0 || idx.cols.len() % p != 0 {
        return Err(Error::invalid(format!(
            "region {region:?} does not align with {p}×{p} patches ({} rows from {}, {} cols from {})",
            idx.rows.len(),
            idx.rows[0],
            idx.cols.len(),
            idx.cols[0]
        )));
    }
    Ok((
        TokenWindow {
            row0: idx.rows[0] / p,
            rows: idx.rows.len() / p,
            col0: idx.cols[0] / p,
            cols: idx.cols.len() / p,
        },
        idx,
    ))
}

/// Finetunes a forecasting model in any of the forecast modes and reports
/// test RMSE/ACC at the evaluation leads.
pub fn finetune_forecast(
    cfg: &ModelConfig,
    params: ParamStore<f32>,
    spec: &ProtocolSpec,
    data: &Splits,
    fc: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    spec.validate()?;
    if !spec.mode.is_forecast() {
        return Err(Error::invalid(format!("{:?} is not a forecasting mode", spec.mode)));
    }
    let mut cfg = cfg.clone();
    let mut params = params;
    if (data.train.grid.height(), data.train.grid.width()) != (cfg.grid_height, cfg.grid_width) {
        return Err(Error::invalid("finetuning data grid differs from the model grid"));
    }
    let inputs = data.train.variables.clone();
    let dynamic = data.train.dynamic_variables();
    let targets = if spec.targets.is_empty() || spec.mode == ProtocolMode::AllVars {
        dynamic.clone()
    } else {
        for t in &spec.targets {
            if !dynamic.contains(t) {
                return Err(if data.train.variables.contains(t) {
                    Error::invalid(format!("`{t}` is static and cannot be a target"))
                } else {
                    Error::UnknownVariable(t.clone())
                });
            }
        }
        spec.targets.clone()
    };
    adopt_variables(&mut cfg, &mut params, &inputs, seed)?;

    let (data, window) = match (spec.mode, &spec.region) {
        (ProtocolMode::Regional, Some(region)) => {
            let (window, idx) = crop_window(&cfg, &data.train.grid, region)?;
            let cropped = data.map(|d| crop_dataset_indices(d, &idx))?;
            (cropped, (!window.is_full(&cfg)).then_some(window))
        }
        _ => (data.clone(), None),
    };
    let step = data.train.time.step_hours;
    let train_leads = match spec.mode {
        ProtocolMode::Continuous => lead_lattice(step, spec.lead_range.0, spec.lead_range.1)?,
        ProtocolMode::Iterative => vec![spec.rollout_step_hours],
        _ => vec![spec.lead_hours],
    };
    let weights = lat_weights(&data.train.grid)?;
    let width = data.train.grid.width();
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c2d_6674);
    let val_pairs = validation_pairs(&data.val, &train_leads, fc.val_pairs, &mut val_rng)?;
    let optim = fc.optim_for(spec.mode);
    let cfg_ref = &cfg;

    let outcome = fit(
        params,
        &optim,
        &fc.fit,
        seed,
        |g, params, rng| {
            let pairs = (0..fc.fit.batch_size)
                .map(|_| sample_pair(&data.train, &train_leads, rng))
                .collect::<Result<Vec<Pair>>>()?;
            let batch = make_batch(&data.train, &pairs, &inputs, &targets, None)?;
            let out = forward(
                g,
                cfg_ref,
                params,
                &ForwardRequest {
                    input: &batch.input,
                    input_vars: &inputs,
                    targets: &targets,
                    lead: batch.lead.clone(),
                    window,
                },
            )?;
            let truth = g.constant(&batch.target);
            lat_mse_loss(g, out.prediction, truth, &weights)
        },
        |params| {
            let (pred, truth) = predict_pairs(cfg_ref, params, &data.val, &val_pairs, &inputs, &targets, window, ForecastMethod::Direct)?;
            let pred: Vec<f64> = pred.iter().map(|&x| x as f64).collect();
            let truth: Vec<f64> = truth.iter().map(|&x| x as f64).collect();
            lat_mse(&pred, &truth, &weights, width)
        },
    )?;

    let method = match spec.mode {
        ProtocolMode::Iterative => ForecastMethod::Rollout {
            step_hours: spec.rollout_step_hours,
        },
        _ => ForecastMethod::Direct,
    };
    let (lo, hi) = (train_leads[0], *train_leads.last().expect("nonempty"));
    let mut report = MetricReport::default();
    for lead in spec.eval_leads() {
        let extrapolated = spec.mode == ProtocolMode::Continuous && (lead < lo || lead > hi);
        let task = if extrapolated { "forecast_extrapolated" } else { "forecast" };
        report.extend(evaluate_forecast(
            &cfg,
            &outcome.params,
            &data.test,
            &inputs,
            &targets,
            &[lead],
            window,
            method,
            task,
        )?);
    }
    Ok(FinetuneOutcome {
        config: cfg,
        fit: outcome,
        report,
    })
}

/// Normalized projection task: samples are years with a full forcing history,
/// split in time order; statistics come from the training years.
pub fn projection_task(data: &ProjectionData, history: usize, fractions: [f64; 3]) -> Result<ProjectionTask> {
    if history == 0 {
        return Err(Error::invalid("history length must be at least one"));
    }
    let years = data.forcing.len();
    if data.response.len() != years || data.response.grid != data.forcing.grid {
        return Err(Error::invalid("forcing and response series are misaligned"));
    }
    let usable: Vec<usize> = (history - 1..years).collect();
    if usable.len() < 3 {
        return Err(Error::invalid(format!(
            "{years} years leave fewer than three samples with a {history}-year history"
        )));
    }
    let n = usable.len();
    let n_train = ((n as f64 * fractions[0]).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * fractions[1]).round() as usize).clamp(1, n - n_train - 1);
    let train = usable[..n_train].to_vec();
    let val = usable[n_train..n_train + n_val].to_vec();
    let test = usable[n_train + n_val..].to_vec();
    // Statistics over every year a training sample touches.
    let last_train = *train.last().expect("nonempty");
    let f_stats = compute_norm_stats(&data.forcing.time_slice(0, last_train + 1)?)?;
    let r_stats = compute_norm_stats(&data.response.time_slice(train[0], train.len())?)?;
    let mut forcing = data.forcing.clone();
    let mut response = data.response.clone();
    normalize(&mut forcing, &f_stats)?;
    normalize(&mut response, &r_stats)?;
    forcing.norm = Some(f_stats);
    response.norm = Some(r_stats);
    Ok(ProjectionTask {
        forcing,
        response,
        history,
        train,
        val,
        test,
    })
}

/// Adds the projection head (and embeddings for unseen forcings) and trains
/// with an unweighted MSE. The frozen variant updates only LayerNorm
/// parameters and the newly created layers.
pub fn finetune_projection(
    cfg: &ModelConfig,
    params: ParamStore<f32>,
    spec: &ProtocolSpec,
    task: &ProjectionTask,
    fc: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    spec.validate()?;
    let frozen = match spec.mode {
        ProtocolMode::ProjectionFrozen => true,
        ProtocolMode::ProjectionFull => false,
        other => return Err(Error::invalid(format!("{other:?} is not a projection mode"))),
    };
    if (task.forcing.grid.height(), task.forcing.grid.width()) != (cfg.grid_height, cfg.grid_width) {
        return Err(Error::invalid("projection grid differs from the model grid"));
    }
    let mut cfg = cfg.clone();
    let mut params = params;
    let added = add_projection_head(
        &mut cfg,
        &mut params,
        &task.forcing.variables,
        &task.response.variables,
        seed,
    )?;
    if frozen {
        params.set_trainable(|n| {
            is_layer_norm(n)
                || n.starts_with("proj.")
                || added
                    .iter()
                    .any(|v| n == format!("var_pos.{v}") || n.starts_with(&format!("var_embed.{v}.")))
        });
    } else {
        params.set_trainable(|_| true);
    }
    let optim = fc.optim_for(spec.mode);
    let cfg_ref = &cfg;
    let outcome = fit(
        params,
        &optim,
        &fc.fit,
        seed,
        |g, params, rng| {
            let years: Vec<usize> = (0..fc.fit.batch_size)
                .map(|_| task.train[rng.random_range(0..task.train.len())])
                .collect();
            let (x, y) = task.batch(&years)?;
            let pred = projection_forward(g, cfg_ref, params, &x)?;
            let truth = g.constant(&y);
            mse_loss(g, pred, truth)
        },
        |params| {
            let mut se = 0.0;
            let mut n = 0;
            for chunk in task.val.chunks(16) {
                let (x, y) = task.batch(chunk)?;
                let mut g = Graph::<f32>::new(Mode::Eval, 0);
                let pred = projection_forward(&mut g, cfg_ref, params, &x)?;
                se += g.value(pred).iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
                n += y.len();
            }
            Ok(se / n as f64)
        },
    )?;
    let mut outcome = outcome;
    outcome.params.set_trainable(|_| true);
    let report = evaluate_projection(&cfg, &outcome.params, task)?;
    Ok(FinetuneOutcome {
        config: cfg,
        fit: outcome,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct DownscaleSplits {
    pub train: DownscaleSplit,
    pub val: DownscaleSplit,
    pub test: DownscaleSplit,
}

/// Interpolates `coarse` onto the grid of `fine`, aligns the two series in
/// time and splits them, normalizing each side with training statistics.
pub fn downscale_splits(coarse: &Dataset, fine: &Dataset, fractions: [f64; 3]) -> Result<DownscaleSplits> {
    if coarse.time != fine.time {
        return Err(Error::invalid("coarse and fine series cover different times"));
    }
    let upsampled = regrid_dataset(coarse, &fine.grid)?;
    let ins = Splits::from_dataset(&upsampled, fractions)?;
    let outs = Splits::from_dataset(fine, fractions)?;
    Ok(DownscaleSplits {
        train: DownscaleSplit {
            input: ins.train,
            target: outs.train,
        },
        val: DownscaleSplit {
            input: ins.val,
            target: outs.val,
        },
        test: DownscaleSplit {
            input: ins.test,
            target: outs.test,
        },
    })
}

/// Trains a map from interpolated coarse fields to fine fields at the same
/// time, with the lead-time embedding held at a constant input. A model
/// built for another grid has its positional embedding interpolated first.
pub fn finetune_downscale(
    cfg: &ModelConfig,
    params: ParamStore<f32>,
    spec: &ProtocolSpec,
    data: &DownscaleSplits,
    fc: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    spec.validate()?;
    if spec.mode != ProtocolMode::Downscale {
        return Err(Error::invalid(format!("{:?} is not the downscale mode", spec.mode)));
    }
    let mut cfg = cfg.clone();
    let mut params = params;
    let grid = &data.train.target.grid;
    if (grid.height(), grid.width()) != (cfg.grid_height, cfg.grid_width) {
        retarget_grid(&mut cfg, &mut params, grid.height(), grid.width())?;
    }
    let inputs = data.train.input.variables.clone();
    let targets = if spec.targets.is_empty() {
        data.train.target.variables.clone()
    } else {
        spec.targets.clone()
    };
    if targets != data.train.target.variables {
        return Err(Error::invalid("downscale targets must match the fine dataset's variables"));
    }
    let mut names = inputs.clone();
    names.extend(targets.iter().filter(|t| !inputs.contains(t)).cloned());
    adopt_variables(&mut cfg, &mut params, &names, seed)?;
    let weights = lat_weights(grid)?;
    let width = grid.width();
    let optim = fc.optim_for(spec.mode);
    let cfg_ref = &cfg;
    let run = |g: &mut Graph<f32>, params: &ParamStore<f32>, split: &DownscaleSplit, times: &[usize]| -> Result<(crate::autograd::Var, crate::autograd::Var)> {
        let (x, y) = split.batch(times)?;
        let out = forward(
            g,
            cfg_ref,
            params,
            &ForwardRequest {
                input: &x,
                input_vars: &inputs,
                targets: &targets,
                lead: LeadTime::Fixed,
                window: None,
            },
        )?;
        let truth = g.constant(&y);
        Ok((out.prediction, truth))
    };
    let outcome = fit(
        params,
        &optim,
        &fc.fit,
        seed,
        |g, params, rng| {
            let n = data.train.target.len();
            let times: Vec<usize> = (0..fc.fit.batch_size).map(|_| rng.random_range(0..n)).collect();
            let (pred, truth) = run(g, params, &data.train, &times)?;
            lat_mse_loss(g, pred, truth, &weights)
        },
        |params| {
            let times: Vec<usize> = (0..data.val.target.len()).collect();
            let mut se = 0.0;
            let mut n = 0;
            for chunk in times.chunks(16) {
                let mut g = Graph::<f32>::new(Mode::Eval, 0);
                let (pred, truth) = run(&mut g, params, &data.val, chunk)?;
                let p: Vec<f64> = g.value(pred).iter().map(|&x| x as f64).collect();
                let t: Vec<f64> = g.value(truth).iter().map(|&x| x as f64).collect();
                se += lat_mse(&p, &t, &weights, width)? * p.len() as f64;
                n += p.len();
            }
            Ok(se / n as f64)
        },
    )?;
    let report = evaluate_downscale(&cfg, &outcome.params, &data.test)?;
    Ok(FinetuneOutcome {
        config: cfg,
        fit: outcome,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iterative_mode_rejects_target_subsets() {
        let mut s = ProtocolSpec::new(ProtocolMode::Iterative);
        s.targets = vec!["a".into()];
        assert!(s.validate().is_err());
        let mut d = ProtocolSpec::new(ProtocolMode::Direct);
        assert!(d.validate().is_err());
        d.targets = vec!["a".into()];
        assert!(d.validate().is_ok());
    }

    #[test]
    fn learning_rates_follow_task_table() {
        let fc = FinetuneConfig::default();
        assert!((fc.optim_for(ProtocolMode::Direct).peak_lr - 5e-5).abs() < 1e-18);
        assert!((fc.optim_for(ProtocolMode::ProjectionFull).peak_lr - 5e-2).abs() < 1e-15);
        assert!((fc.optim_for(ProtocolMode::Downscale).peak_lr - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn protocol_modes_serialize_snake_case() {
        let s: ProtocolMode = serde_json::from_str("\"projection_frozen\"").unwrap();
        assert_eq!(s, ProtocolMode::ProjectionFrozen);
    }
}
