//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::climax::is_positional;
use crate::tensor::{ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Full scale: 10 000.
    pub warmup_steps: usize,
    /// Full scale: 200 000 pretraining steps.
    pub total_steps: usize,
    /// Global L2 norm clip, off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::pretrain()
    }
}

impl OptimConfig {
    pub fn pretrain() -> Self {
        OptimConfig {
            peak_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-5,
            warmup_steps: 100,
            total_steps: 2000,
            grad_clip: None,
        }
    }

    pub fn finetune(peak_lr: f64) -> Self {
        OptimConfig {
            peak_lr,
            beta2: 0.999,
            total_steps: 500,
            ..OptimConfig::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("peak_lr must be ≥ 0 and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("eps must be positive and weight_decay non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    if cfg.total_steps <= w || step >= cfg.total_steps {
        return if step >= cfg.total_steps && cfg.total_steps > w { 0.0 } else { cfg.peak_lr };
    }
    let progress = (step - w) as f64 / (cfg.total_steps - w) as f64;
    (cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[derive(Clone, Debug, Default)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Optimizer state keyed by parameter name. Parameters without a gradient
/// (frozen or unused this step) are left untouched, including their decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW<T> {
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new() -> Self {
        AdamW { state: BTreeMap::new() }
    }

    /// One update of every parameter holding a gradient. Gradients are
    /// cleared afterwards. Non-finite gradients abort before any change.
    pub fn step(&mut self, params: &mut ParamStore<T>, cfg: &OptimConfig, lr: f64) -> Result<()> {
        let mut sq_norm = 0.0;
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("non-finite gradient for `{name}`")));
                }
                sq_norm += g.iter().map(|x| x.f64().powi(2)).sum::<f64>();
            }
        }
        let clip = match cfg.grad_clip {
            Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
            _ => 1.0,
        };
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (name, t) in params.iter_mut() {
            let Some(grad) = t.grad.take() else { continue };
            if !t.requires_grad {
                continue;
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - b1.powi(st.steps as i32);
            let bc2 = 1.0 - b2.powi(st.steps as i32);
            let decay = if is_positional(name) { 0.0 } else { lr * cfg.weight_decay };
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i].f64() * clip;
                let m = b1 * st.m[i].f64() + (1.0 - b1) * g;
                let v = b2 * st.v[i].f64() + (1.0 - b2) * g * g;
                st.m[i] = T::cst(m);
                st.v[i] = T::cst(v);
                let mut p = x.f64();
                p -= decay * p;
                p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                *x = T::cst(p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig {
            warmup_steps: 10_000,
            total_steps: 200_000,
            ..OptimConfig::pretrain()
        };
        assert!((lr_at(5000, &cfg) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_at(10_000, &cfg), 5e-4);
        assert_eq!(lr_at(200_000, &cfg), 0.0);
        assert_eq!(lr_at(0, &cfg), 0.0);
        let just_before = lr_at(9_999, &cfg);
        assert!((just_before - 5e-4).abs() < 1e-7);
    }

    fn store(name: &str, value: f64, grad: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.grad = grad.map(|g| vec![g]);
        s.insert(name, t);
        s
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // f(θ) = θ²/2 at θ = 1 → g = 1.
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::finetune(1e-2)
        };
        let mut p = store("w", 1.0, Some(1.0));
        AdamW::new().step(&mut p, &cfg, 1e-2).unwrap();
        let m_hat = (0.1 * 1.0) / (1.0 - 0.9);
        let v_hat = (0.001 * 1.0) / (1.0 - 0.999);
        let expect = 1.0 - 1e-2 * 0.1 * 1.0 - 1e-2 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_and_zero_grad_are_identity() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::pretrain()
        };
        let mut p = store("w", 0.7, Some(0.0));
        AdamW::new().step(&mut p, &cfg, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        let mut p = store("w", 0.7, Some(3.0));
        AdamW::new().step(&mut p, &OptimConfig::pretrain(), 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn positional_embeddings_are_not_decayed() {
        let cfg = OptimConfig::pretrain();
        for name in ["pos_embed", "var_pos.t"] {
            let mut p = store(name, 0.7, Some(0.0));
            AdamW::new().step(&mut p, &cfg, 1e-3).unwrap();
            assert_eq!(p.get(name).unwrap().data()[0], 0.7);
        }
        let mut p = store("w", 0.7, Some(0.0));
        AdamW::new().step(&mut p, &cfg, 1e-3).unwrap();
        assert!(p.get("w").unwrap().data()[0] < 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = store("w", 0.7, Some(f64::NAN));
        assert!(AdamW::new().step(&mut p, &OptimConfig::pretrain(), 1e-3).is_err());
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn warmup_longer_than_total_is_invalid() {
        let cfg = OptimConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..OptimConfig::pretrain()
        };
        assert!(cfg.validate().is_err());
    }
}
