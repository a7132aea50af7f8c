//! Autoregressive rollout of a short-lead model.

use crate::autograd::{Graph, Mode};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardRequest, LeadTime, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Normalized `[B, V_dyn, H, W]` prediction after each step.
    pub trajectory: Vec<Tensor<f32>>,
    /// The dynamic variables, in prediction order.
    pub variables: Vec<String>,
    pub forward_calls: usize,
}

/// Feeds each prediction back as the next input, `horizon / step` times.
/// Dynamic inputs are all non-static `input_vars`; static fields are copied
/// from `input` unchanged at every step.
pub fn rollout(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    input: &Tensor<f32>,
    input_vars: &[String],
    static_vars: &[String],
    horizon_hours: u32,
    step_hours: u32,
) -> Result<Rollout> {
    if step_hours == 0 || horizon_hours == 0 || horizon_hours % step_hours != 0 {
        return Err(Error::invalid(format!(
            "horizon {horizon_hours} h is not a positive multiple of the {step_hours} h step"
        )));
    }
    let s = input.shape();
    if s.len() != 4 || s[1] != input_vars.len() {
        return Err(Error::invalid(format!("rollout input {s:?} does not match {} variables", input_vars.len())));
    }
    let (b, nv, cells) = (s[0], s[1], s[2] * s[3]);
    let dynamic: Vec<String> = input_vars.iter().filter(|v| !static_vars.contains(v)).cloned().collect();
    if dynamic.is_empty() {
        return Err(Error::invalid("rollout needs at least one dynamic variable"));
    }
    // Position of each input variable within the prediction, if dynamic.
    let slot: Vec<Option<usize>> = input_vars
        .iter()
        .map(|v| dynamic.iter().position(|d| d == v))
        .collect();
    let mut state = input.clone();
    let mut trajectory = Vec::new();
    for _ in 0..horizon_hours / step_hours {
        let mut g = Graph::<f32>::new(Mode::Eval, 0);
        let out = forward(
            &mut g,
            cfg,
            params,
            &ForwardRequest {
                input: &state,
                input_vars,
                targets: &dynamic,
                lead: LeadTime::Hours(vec![step_hours as f64; b]),
                window: None,
            },
        )?;
        let pred = g.tensor(out.prediction);
        let mut next = Vec::with_capacity(state.len());
        for bi in 0..b {
            for (v, sl) in slot.iter().enumerate() {
                let src = match sl {
                    Some(d) => &pred.data()[(bi * dynamic.len() + d) * cells..][..cells],
                    None => &input.data()[(bi * nv + v) * cells..][..cells],
                };
                next.extend_from_slice(src);
            }
        }
        state = Tensor::new(s.to_vec(), next)?;
        trajectory.push(Tensor::new(pred.shape().to_vec(), pred.into_data())?);
    }
    Ok(Rollout {
        forward_calls: trajectory.len(),
        trajectory,
        variables: dynamic,
    })
}
