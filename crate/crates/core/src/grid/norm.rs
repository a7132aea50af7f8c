use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, GriddedSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-variable mean and (population) standard deviation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    pub vars: BTreeMap<String, VarStats>,
}

impl NormStats {
    pub fn get(&self, name: &str) -> Result<VarStats> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: VarStats) -> Result<()> {
        let name = name.into();
        if !(stats.std > 0.0) || !stats.std.is_finite() || !stats.mean.is_finite() {
            return Err(Error::ZeroStd(name));
        }
        self.vars.insert(name, stats);
        Ok(())
    }

    pub fn subset(&self, names: &[String]) -> Result<NormStats> {
        let mut out = NormStats::default();
        for n in names {
            out.insert(n.clone(), self.get(n)?)?;
        }
        Ok(out)
    }

    /// Stats for the given variables in order.
    pub fn for_variables(&self, names: &[String]) -> Result<Vec<VarStats>> {
        names.iter().map(|n| self.get(n)).collect()
    }
}

/// Mean and population standard deviation of every variable over all
/// times and grid cells of `dataset`.
pub fn compute_norm_stats(dataset: &Dataset) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot compute statistics of an empty dataset"));
    }
    let mut stats = NormStats::default();
    let cells = dataset.grid.cells();
    let n = (dataset.len() * cells) as f64;
    for (v, name) in dataset.variables.iter().enumerate() {
        let mut sum = 0.0;
        for t in 0..dataset.len() {
            sum += dataset.field(t, v).iter().map(|&x| x as f64).sum::<f64>();
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for t in 0..dataset.len() {
            ss += dataset
                .field(t, v)
                .iter()
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>();
        }
        let std = (ss / n).sqrt();
        if std <= 0.0 {
            return Err(Error::ZeroStd(name.clone()));
        }
        stats.insert(name.clone(), VarStats { mean, std })?;
    }
    Ok(stats)
}

fn apply(values: &mut [f32], variables: &[String], cells: usize, stats: &NormStats, forward: bool) -> Result<()> {
    let per_var = stats.for_variables(variables)?;
    let frame = variables.len() * cells;
    for chunk in values.chunks_mut(frame) {
        for (v, s) in per_var.iter().enumerate() {
            for x in &mut chunk[v * cells..(v + 1) * cells] {
                let y = if forward {
                    (*x as f64 - s.mean) / s.std
                } else {
                    *x as f64 * s.std + s.mean
                };
                *x = y as f32;
            }
        }
    }
    Ok(())
}

pub fn normalize(dataset: &mut Dataset, stats: &NormStats) -> Result<()> {
    let vars = dataset.variables.clone();
    let cells = dataset.grid.cells();
    apply(dataset.data_mut(), &vars, cells, stats, true)
}

pub fn denormalize(dataset: &mut Dataset, stats: &NormStats) -> Result<()> {
    let vars = dataset.variables.clone();
    let cells = dataset.grid.cells();
    apply(dataset.data_mut(), &vars, cells, stats, false)
}

pub fn normalize_sample(sample: &mut GriddedSample, stats: &NormStats) -> Result<()> {
    let cells = sample.grid.cells();
    apply(&mut sample.values, &sample.variables, cells, stats, true)
}

pub fn denormalize_sample(sample: &mut GriddedSample, stats: &NormStats) -> Result<()> {
    let cells = sample.grid.cells();
    apply(&mut sample.values, &sample.variables, cells, stats, false)
}

/// Maps normalized values of `variables` laid out `[..., V, cells]` back to
/// physical units.
pub fn denormalize_values(values: &mut [f32], variables: &[String], cells: usize, stats: &NormStats) -> Result<()> {
    apply(values, variables, cells, stats, false)
}
