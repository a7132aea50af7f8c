//! The optimization loop shared by pretraining and every finetuning mode:
//! seeded minibatch steps, periodic validation, early stopping and a step log.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, AdamW, OptimConfig};
use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Validation rounds without improvement before training stops.
pub const DEFAULT_PATIENCE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 500,
            batch_size: 8,
            eval_every: 50,
            patience: DEFAULT_PATIENCE,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::invalid("batch_size, eval_every and patience must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn write_step_log(path: impl AsRef<Path>, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in log {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters at the best validation round.
    pub params: ParamStore<f32>,
    pub best_val: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub log: Vec<StepRecord>,
}

/// Per-step graph seed; keeps dropout masks independent of the data stream.
fn graph_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (step as u64).wrapping_add(0x5851_f42d)
}

/// Runs `fit.steps` AdamW steps. `train_loss` builds the minibatch loss for
/// a step in a train-mode graph, drawing data from the shared `rng`;
/// `val_loss` scores a parameter snapshot. Only parameters whose
/// `requires_grad` is set move.
pub fn fit<F, V>(
    mut params: ParamStore<f32>,
    optim: &OptimConfig,
    fit: &FitConfig,
    seed: u64,
    mut train_loss: F,
    mut val_loss: V,
) -> Result<FitOutcome>
where
    F: FnMut(&mut Graph<f32>, &ParamStore<f32>, &mut ChaCha8Rng) -> Result<Var>,
    V: FnMut(&ParamStore<f32>) -> Result<f64>,
{
    optim.validate()?;
    fit.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamW::new();
    let mut log = Vec::with_capacity(fit.steps);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut stale = 0;
    let mut steps_run = 0;
    params.zero_grad();
    for step in 0..fit.steps {
        let lr = lr_at(step, optim);
        let mut g = Graph::new(Mode::Train, graph_seed(seed, step));
        let loss = train_loss(&mut g, &params, &mut rng)?;
        let value = g.value(loss)[0] as f64;
        g.backward(loss)?;
        g.accumulate_param_grads(&mut params);
        drop(g);
        adam.step(&mut params, optim, lr)?;
        steps_run = step + 1;
        let last = step + 1 == fit.steps;
        let val = if (step + 1) % fit.eval_every == 0 || last {
            Some(val_loss(&params)?)
        } else {
            None
        };
        log.push(StepRecord {
            step: step + 1,
            lr,
            train_loss: value,
            val_loss: val,
        });
        if let Some(v) = val {
            let improved = best.as_ref().is_none_or(|(b, _, _)| v < *b);
            if improved {
                best = Some((v, step + 1, params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= fit.patience {
                    log::info!("early stop at step {} (best {:?})", step + 1, best.as_ref().map(|b| b.1));
                    break;
                }
            }
        }
    }
    let (best_val, best_step, params) = match best {
        Some(b) => b,
        None => (val_loss(&params)?, 0, params),
    };
    Ok(FitOutcome {
        params,
        best_val,
        best_step,
        steps_run,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        p
    }

    fn loss(g: &mut Graph<f32>, p: &ParamStore<f32>, _: &mut ChaCha8Rng) -> Result<Var> {
        let w = g.param(p, "w")?;
        let s = g.square(w)?;
        g.sum_all(s)
    }

    fn val(p: &ParamStore<f32>) -> Result<f64> {
        Ok(p.get("w").unwrap().data().iter().map(|x| (x * x) as f64).sum())
    }

    #[test]
    fn minimizes_quadratic_and_logs_every_step() {
        let optim = OptimConfig {
            peak_lr: 0.1,
            warmup_steps: 0,
            total_steps: 300,
            weight_decay: 0.0,
            ..OptimConfig::finetune(0.1)
        };
        let fc = FitConfig {
            steps: 300,
            eval_every: 10,
            patience: 100,
            ..FitConfig::default()
        };
        let out = fit(quadratic(), &optim, &fc, 0, loss, val).unwrap();
        assert!(out.best_val < 1e-3, "{}", out.best_val);
        assert_eq!(out.log.len(), 300);
        assert!(out.log.iter().filter(|r| r.val_loss.is_some()).count() == 30);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = quadratic();
        p.set_trainable(|_| false);
        let out = fit(p, &OptimConfig::finetune(0.1), &FitConfig { steps: 5, ..FitConfig::default() }, 0, loss, val).unwrap();
        assert_eq!(out.params.get("w").unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn patience_stops_early() {
        let optim = OptimConfig {
            peak_lr: 0.0,
            ..OptimConfig::finetune(0.0)
        };
        let fc = FitConfig {
            steps: 100,
            eval_every: 1,
            patience: 5,
            ..FitConfig::default()
        };
        let out = fit(quadratic(), &optim, &fc, 0, loss, val).unwrap();
        assert_eq!(out.steps_run, 6);
        assert_eq!(out.best_step, 1);
    }
}
