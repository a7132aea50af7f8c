//! Multi-source pretraining with randomized lead times.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{lead_lattice, make_batch, sample_pair, validation_pairs, Pair, MAX_LEAD_HOURS, MIN_LEAD_HOURS};
use super::fit::{fit, FitConfig, FitOutcome};
use super::optim::OptimConfig;
use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::grid::Dataset;
use crate::metrics::{lat_mse, lat_mse_loss, lat_weights};
use crate::model::{forward, ForwardRequest, ModelConfig};
use crate::tensor::ParamStore;

/// One simulated "climate model": normalized train and validation series.
#[derive(Clone, Debug)]
pub struct PretrainSource {
    pub name: String,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub fit: FitConfig,
    pub optim: OptimConfig,
    pub min_lead_hours: u32,
    pub max_lead_hours: u32,
    /// Fixed validation pairs drawn per source.
    pub val_pairs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            fit: FitConfig {
                steps: 2000,
                batch_size: 8,
                eval_every: 100,
                patience: super::fit::DEFAULT_PATIENCE,
            },
            optim: OptimConfig::pretrain(),
            min_lead_hours: MIN_LEAD_HOURS,
            max_lead_hours: MAX_LEAD_HOURS,
            val_pairs: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub fit: FitOutcome,
    /// Validation lat-MSE of predicting `X_{t+Δt} = X_t` on the same pairs.
    pub persistence_val: f64,
}

struct SourcePlan<'a> {
    src: &'a PretrainSource,
    inputs: Vec<String>,
    targets: Vec<String>,
    weights: Vec<f64>,
    leads: Vec<u32>,
    val: Vec<Pair>,
}

fn plan<'a>(cfg: &ModelConfig, src: &'a PretrainSource, pc: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<SourcePlan<'a>> {
    let ds = &src.train;
    if ds.variables != src.val.variables || ds.grid != src.val.grid {
        return Err(Error::invalid(format!("source `{}`: train and val layouts differ", src.name)));
    }
    if (ds.grid.height(), ds.grid.width()) != (cfg.grid_height, cfg.grid_width) {
        return Err(Error::invalid(format!(
            "source `{}` grid {}×{} differs from model grid {}×{}",
            src.name,
            ds.grid.height(),
            ds.grid.width(),
            cfg.grid_height,
            cfg.grid_width
        )));
    }
    for v in &ds.variables {
        cfg.vocabulary.index_of(v)?;
    }
    let targets = ds.dynamic_variables();
    if targets.is_empty() {
        return Err(Error::invalid(format!("source `{}` has no dynamic variables", src.name)));
    }
    let leads = lead_lattice(ds.time.step_hours, pc.min_lead_hours, pc.max_lead_hours)?;
    let val = validation_pairs(&src.val, &leads, pc.val_pairs, rng)?;
    Ok(SourcePlan {
        src,
        inputs: ds.variables.clone(),
        targets,
        weights: lat_weights(&ds.grid)?,
        leads,
        val,
    })
}

/// Mean validation lat-MSE over sources (model) and the persistence baseline.
fn validation_losses(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    plans: &[SourcePlan<'_>],
    batch_size: usize,
    persistence: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for p in plans {
        let mut se = 0.0;
        let mut n = 0usize;
        for chunk in p.val.chunks(batch_size) {
            let batch = make_batch(&p.src.val, chunk, &p.inputs, &p.targets, None)?;
            let truth: Vec<f64> = batch.target.data().iter().map(|&x| x as f64).collect();
            let pred: Vec<f64> = if persistence {
                fields_at(&p.src.val, chunk, &p.targets)?
            } else {
                let mut g = Graph::<f32>::new(Mode::Eval, 0);
                let out = forward(
                    &mut g,
                    cfg,
                    params,
                    &ForwardRequest {
                        input: &batch.input,
                        input_vars: &p.inputs,
                        targets: &p.targets,
                        lead: batch.lead.clone(),
                        window: None,
                    },
                )?;
                g.value(out.prediction).iter().map(|&x| x as f64).collect()
            };
            se += lat_mse(&pred, &truth, &p.weights, p.src.val.grid.width())? * truth.len() as f64;
            n += truth.len();
        }
        total += se / n as f64;
    }
    Ok(total / plans.len() as f64)
}

/// Target-variable fields at each pair's input time.
fn fields_at(ds: &Dataset, pairs: &[Pair], vars: &[String]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = vars.iter().map(|v| ds.var_index(v)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for p in pairs {
        for &v in &idx {
            out.extend(ds.field(p.t, v).iter().map(|&x| x as f64));
        }
    }
    Ok(out)
}

/// Pretrains `params` on `sources`, cycling through them one batch per step.
/// Each source contributes the loss over its own dynamic variables.
pub fn pretrain(
    cfg: &ModelConfig,
    params: ParamStore<f32>,
    sources: &[PretrainSource],
    pc: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if sources.is_empty() {
        return Err(Error::invalid("pretraining needs at least one source"));
    }
    let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76616c);
    let plans: Vec<SourcePlan<'_>> = sources
        .iter()
        .map(|s| plan(cfg, s, pc, &mut val_rng))
        .collect::<Result<_>>()?;
    let persistence_val = validation_losses(cfg, &params, &plans, pc.fit.batch_size, true)?;
    let mut step = 0usize;
    let outcome = fit(
        params,
        &pc.optim,
        &pc.fit,
        seed,
        |g, params, rng| {
            let p = &plans[step % plans.len()];
            step += 1;
            let pairs = (0..pc.fit.batch_size)
                .map(|_| sample_pair(&p.src.train, &p.leads, rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&p.src.train, &pairs, &p.inputs, &p.targets, None)?;
            let out = forward(
                g,
                cfg,
                params,
                &ForwardRequest {
                    input: &batch.input,
                    input_vars: &p.inputs,
                    targets: &p.targets,
                    lead: batch.lead.clone(),
                    window: None,
                },
            )?;
            let truth = g.constant(&batch.target);
            lat_mse_loss(g, out.prediction, truth, &p.weights)
        },
        |params| validation_losses(cfg, params, &plans, pc.fit.batch_size, false),
    )?;
    Ok(PretrainOutcome {
        fit: outcome,
        persistence_val,
    })
}
