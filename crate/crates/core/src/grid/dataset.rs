use serde::{Deserialize, Serialize};

use super::norm::NormStats;
use super::spec::{validate_variable_name, GridSpec};
use crate::error::{Error, Result};

/// Regular time axis in whole hours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub start_hour: i64,
    pub step_hours: i64,
    pub count: usize,
}

impl TimeAxis {
    pub fn hour(&self, index: usize) -> i64 {
        self.start_hour + index as i64 * self.step_hours
    }
}

/// One snapshot `V×H×W` at a single time.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedSample {
    pub time: i64,
    pub grid: GridSpec,
    pub variables: Vec<String>,
    pub values: Vec<f32>,
}

impl GriddedSample {
    pub fn new(time: i64, grid: GridSpec, variables: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != variables.len() * grid.cells() {
            return Err(Error::invalid(format!(
                "sample holds {} values, expected {}×{}×{}",
                values.len(),
                variables.len(),
                grid.height(),
                grid.width()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample values must be finite"));
        }
        Ok(GriddedSample {
            time,
            grid,
            variables,
            values,
        })
    }

    pub fn field(&self, var: usize) -> &[f32] {
        let n = self.grid.cells();
        &self.values[var * n..(var + 1) * n]
    }
}

/// Time-ordered series of snapshots on a common grid, stored `T×V×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub variables: Vec<String>,
    /// Time-invariant inputs (land-sea mask analogues); never targets.
    pub static_variables: Vec<String>,
    pub time: TimeAxis,
    pub norm: Option<NormStats>,
    /// Generator parameters when the data is synthetic.
    pub generator: Option<serde_json::Value>,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(
        grid: GridSpec,
        variables: Vec<String>,
        time: TimeAxis,
        data: Vec<f32>,
    ) -> Result<Self> {
        for v in &variables {
            validate_variable_name(v)?;
        }
        for (i, v) in variables.iter().enumerate() {
            if variables[..i].contains(v) {
                return Err(Error::invalid(format!("duplicate variable `{v}`")));
            }
        }
        let expected = time.count * variables.len() * grid.cells();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "dataset payload has {} values, manifest declares {expected}",
                data.len()
            )));
        }
        if time.step_hours <= 0 {
            return Err(Error::invalid("time step must be positive"));
        }
        Ok(Dataset {
            grid,
            variables,
            static_variables: Vec::new(),
            time,
            norm: None,
            generator: None,
            data,
        })
    }

    pub fn with_static(mut self, names: Vec<String>) -> Result<Self> {
        for n in &names {
            if !self.variables.contains(n) {
                return Err(Error::UnknownVariable(n.clone()));
            }
        }
        self.static_variables = names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.time.count
    }

    pub fn is_empty(&self) -> bool {
        self.time.count == 0
    }

    pub fn num_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn frame_len(&self) -> usize {
        self.variables.len() * self.grid.cells()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn field(&self, t: usize, var: usize) -> &[f32] {
        let n = self.grid.cells();
        let off = t * self.frame_len() + var * n;
        &self.data[off..off + n]
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn is_static(&self, name: &str) -> bool {
        self.static_variables.iter().any(|s| s == name)
    }

    /// Variables that may serve as prediction targets.
    pub fn dynamic_variables(&self) -> Vec<String> {
        self.variables
            .iter()
            .filter(|v| !self.is_static(v))
            .cloned()
            .collect()
    }

    pub fn sample(&self, t: usize) -> GriddedSample {
        GriddedSample {
            time: self.time.hour(t),
            grid: self.grid.clone(),
            variables: self.variables.clone(),
            values: self.frame(t).to_vec(),
        }
    }

    /// Contiguous range of time steps.
    pub fn time_slice(&self, start: usize, count: usize) -> Result<Dataset> {
        if start + count > self.len() {
            return Err(Error::invalid(format!(
                "time slice {start}..{} exceeds {} steps",
                start + count,
                self.len()
            )));
        }
        let n = self.frame_len();
        let mut out = self.clone();
        out.data = self.data[start * n..(start + count) * n].to_vec();
        out.time = TimeAxis {
            start_hour: self.time.hour(start),
            step_hours: self.time.step_hours,
            count,
        };
        Ok(out)
    }

    /// Keeps only the named variables, in the given order.
    pub fn select_variables(&self, names: &[String]) -> Result<Dataset> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.var_index(n))
            .collect::<Result<_>>()?;
        let cells = self.grid.cells();
        let mut data = Vec::with_capacity(self.len() * names.len() * cells);
        for t in 0..self.len() {
            for &v in &idx {
                data.extend_from_slice(self.field(t, v));
            }
        }
        let mut out = Dataset::new(self.grid.clone(), names.to_vec(), self.time, data)?;
        out.static_variables = self
            .static_variables
            .iter()
            .filter(|s| names.contains(s))
            .cloned()
            .collect();
        out.norm = self.norm.as_ref().map(|n| n.subset(names)).transpose()?;
        out.generator = self.generator.clone();
        Ok(out)
    }

    /// Splits along time into consecutive `fractions` (which should sum to 1).
    pub fn split(&self, fractions: &[f64]) -> Result<Vec<Dataset>> {
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        for (i, f) in fractions.iter().enumerate() {
            let count = if i + 1 == fractions.len() {
                self.len() - start
            } else {
                ((self.len() as f64) * f).round() as usize
            };
            let count = count.min(self.len() - start);
            out.push(self.time_slice(start, count)?);
            start += count;
        }
        Ok(out)
    }

    pub(crate) fn replace_data(&mut self, grid: GridSpec, data: Vec<f32>) {
        debug_assert_eq!(data.len(), self.len() * self.variables.len() * grid.cells());
        self.grid = grid;
        self.data = data;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let grid = GridSpec::equiangular(2, 4);
        let time = TimeAxis {
            start_hour: 0,
            step_hours: 6,
            count: 3,
        };
        let data = (0..3 * 2 * 8).map(|x| x as f32).collect();
        Dataset::new(grid, vec!["a".into(), "b".into()], time, data).unwrap()
    }

    #[test]
    fn frame_and_field_indexing() {
        let d = tiny();
        assert_eq!(d.frame(1)[0], 16.0);
        assert_eq!(d.field(2, 1)[0], 40.0);
        assert_eq!(d.sample(2).time, 12);
    }

    #[test]
    fn payload_size_is_checked() {
        let grid = GridSpec::equiangular(2, 4);
        let time = TimeAxis {
            start_hour: 0,
            step_hours: 6,
            count: 3,
        };
        assert!(Dataset::new(grid, vec!["a".into()], time, vec![0.0; 5]).is_err());
    }

    #[test]
    fn split_and_select() {
        let d = tiny();
        let parts = d.split(&[0.67, 0.33]).unwrap();
        assert_eq!(parts[0].len() + parts[1].len(), 3);
        assert_eq!(parts[1].time.start_hour, 12);
        let b = d.select_variables(&["b".into()]).unwrap();
        assert_eq!(b.field(0, 0), d.field(0, 1));
    }
}
