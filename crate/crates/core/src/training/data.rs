//! Assembling `(X_t, Δt, X_{t+Δt})` batches from normalized datasets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Dataset;
use crate::model::LeadTime;
use crate::tensor::Tensor;

/// Shortest and longest pretraining lead, in hours.
pub const MIN_LEAD_HOURS: u32 = 6;
pub const MAX_LEAD_HOURS: u32 = 168;

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, V, H, W]`
    pub input: Tensor<f32>,
    /// `[B, V', H, W]`
    pub target: Tensor<f32>,
    pub lead: LeadTime,
}

/// One example: input index `t` and target index `t + lead_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub t: usize,
    pub lead_steps: usize,
}

/// Lead times on the dataset's time lattice within `[min, max]` hours.
pub fn lead_lattice(step_hours: i64, min: u32, max: u32) -> Result<Vec<u32>> {
    if step_hours <= 0 || min == 0 || min > max {
        return Err(Error::invalid(format!("invalid lead range [{min}, {max}] h")));
    }
    let step = step_hours as u32;
    let out: Vec<u32> = (1..=max / step).map(|k| k * step).filter(|&h| h >= min).collect();
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "no multiple of the {step} h step lies in [{min}, {max}] h"
        )));
    }
    Ok(out)
}

/// Number of lattice steps spanned by `hours`.
pub fn lead_steps(ds: &Dataset, hours: u32) -> Result<usize> {
    let step = ds.time.step_hours;
    if hours == 0 || hours as i64 % step != 0 {
        return Err(Error::invalid(format!(
            "lead {hours} h is not a positive multiple of the {step} h step"
        )));
    }
    Ok((hours as i64 / step) as usize)
}

/// Draws a pair with the lead uniform on `leads` (hours). Leads that the
/// series cannot cover are redrawn.
pub fn sample_pair(ds: &Dataset, leads: &[u32], rng: &mut ChaCha8Rng) -> Result<Pair> {
    let feasible: Vec<usize> = leads
        .iter()
        .map(|&h| lead_steps(ds, h))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&k| k < ds.len())
        .collect();
    if feasible.is_empty() {
        return Err(Error::invalid(format!(
            "series of {} steps cannot cover any requested lead time",
            ds.len()
        )));
    }
    let k = feasible[rng.random_range(0..feasible.len())];
    Ok(Pair {
        t: rng.random_range(0..ds.len() - k),
        lead_steps: k,
    })
}

/// All pairs with the given lead, in time order.
pub fn all_pairs(ds: &Dataset, lead_hours: u32) -> Result<Vec<Pair>> {
    let k = lead_steps(ds, lead_hours)?;
    Ok((0..ds.len().saturating_sub(k)).map(|t| Pair { t, lead_steps: k }).collect())
}

fn gather_frame(ds: &Dataset, t: usize, idx: &[usize], out: &mut Vec<f32>) {
    for &v in idx {
        out.extend_from_slice(ds.field(t, v));
    }
}

/// Stacks `pairs` into a batch with `inputs` at `t` and `targets` at
/// `t + lead`; leads are taken from the pairs unless `lead` overrides them.
pub fn make_batch(
    ds: &Dataset,
    pairs: &[Pair],
    inputs: &[String],
    targets: &[String],
    lead: Option<LeadTime>,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let in_idx: Vec<usize> = inputs.iter().map(|v| ds.var_index(v)).collect::<Result<_>>()?;
    let out_idx: Vec<usize> = targets.iter().map(|v| ds.var_index(v)).collect::<Result<_>>()?;
    let (h, w) = (ds.grid.height(), ds.grid.width());
    let mut x = Vec::with_capacity(pairs.len() * in_idx.len() * h * w);
    let mut y = Vec::with_capacity(pairs.len() * out_idx.len() * h * w);
    for p in pairs {
        if p.t + p.lead_steps >= ds.len() {
            return Err(Error::invalid(format!("pair {p:?} exceeds the series")));
        }
        gather_frame(ds, p.t, &in_idx, &mut x);
        gather_frame(ds, p.t + p.lead_steps, &out_idx, &mut y);
    }
    let b = pairs.len();
    let lead = lead.unwrap_or_else(|| {
        LeadTime::Hours(
            pairs
                .iter()
                .map(|p| (p.lead_steps as i64 * ds.time.step_hours) as f64)
                .collect(),
        )
    });
    Ok(Batch {
        input: Tensor::new(vec![b, in_idx.len(), h, w], x)?,
        target: Tensor::new(vec![b, out_idx.len(), h, w], y)?,
        lead,
    })
}

/// Deterministic validation pairs: `count` draws from a dedicated stream.
pub fn validation_pairs(ds: &Dataset, leads: &[u32], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    (0..count).map(|_| sample_pair(ds, leads, rng)).collect()
}
