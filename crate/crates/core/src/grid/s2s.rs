//! Sub-seasonal targets: window-averaged fields at multi-week leads.

use super::dataset::{Dataset, TimeAxis};
use crate::error::{Error, Result};

pub const WEEKS_3_4_LEAD_HOURS: i64 = 336;
pub const WEEKS_5_6_LEAD_HOURS: i64 = 672;
pub const BIWEEKLY_WINDOW_HOURS: i64 = 336;

/// Inputs and averaged targets aligned on the same time axis.
#[derive(Clone, Debug)]
pub struct S2sPairs {
    pub inputs: Dataset,
    pub targets: Dataset,
    pub lead_hours: i64,
    pub window_hours: i64,
    /// Timestamps dropped for lack of future coverage.
    pub skipped: usize,
}

/// For each time `t`, averages `target_vars` over `[t + lead, t + lead + window)`.
/// Timestamps without a full window ahead are skipped and counted.
pub fn build_s2s_targets(
    series: &Dataset,
    target_vars: &[String],
    lead_hours: i64,
    window_hours: i64,
) -> Result<S2sPairs> {
    let step = series.time.step_hours;
    if lead_hours <= 0 || window_hours <= 0 {
        return Err(Error::invalid("lead and window must be positive"));
    }
    if lead_hours % step != 0 || window_hours % step != 0 {
        return Err(Error::invalid(format!(
            "time step {step} h must divide lead {lead_hours} h and window {window_hours} h"
        )));
    }
    let lead = (lead_hours / step) as usize;
    let window = (window_hours / step) as usize;
    let usable = series.len().saturating_sub(lead + window - 1);
    let skipped = series.len() - usable;
    let var_idx: Vec<usize> = target_vars
        .iter()
        .map(|v| series.var_index(v))
        .collect::<Result<_>>()?;
    if let Some(s) = target_vars.iter().find(|v| series.is_static(v)) {
        return Err(Error::invalid(format!("static variable `{s}` cannot be a target")));
    }
    let cells = series.grid.cells();
    let mut data = vec![0f32; usable * var_idx.len() * cells];
    let mut acc = vec![0f64; var_idx.len() * cells];
    for t in 0..usable {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for s in t + lead..t + lead + window {
            for (k, &v) in var_idx.iter().enumerate() {
                for (a, &x) in acc[k * cells..(k + 1) * cells].iter_mut().zip(series.field(s, v)) {
                    *a += x as f64;
                }
            }
        }
        let out = &mut data[t * acc.len()..(t + 1) * acc.len()];
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = (a / window as f64) as f32;
        }
    }
    let time = TimeAxis {
        start_hour: series.time.start_hour,
        step_hours: step,
        count: usable,
    };
    let mut targets = Dataset::new(series.grid.clone(), target_vars.to_vec(), time, data)?;
    targets.norm = series
        .norm
        .as_ref()
        .map(|n| n.subset(target_vars))
        .transpose()?;
    let inputs = series.time_slice(0, usable)?;
    Ok(S2sPairs {
        inputs,
        targets,
        lead_hours,
        window_hours,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn series(values: Vec<f32>) -> Dataset {
        let time = TimeAxis {
            start_hour: 0,
            step_hours: 6,
            count: values.len(),
        };
        Dataset::new(GridSpec::equiangular(1, 1), vec!["v".into()], time, values).unwrap()
    }

    #[test]
    fn linear_series_matches_arithmetic_mean() {
        // v(t) = t in hours; mean of t+336 .. t+666 step 6 is t+501.
        let n = 200;
        let s = series((0..n).map(|i| (i * 6) as f32).collect());
        let p = build_s2s_targets(&s, &["v".into()], 336, 336).unwrap();
        assert_eq!(p.targets.len(), n - 56 - 55);
        assert_eq!(p.skipped, 111);
        for t in 0..p.targets.len() {
            assert_eq!(p.targets.field(t, 0)[0], (t * 6 + 501) as f32);
        }
        assert_eq!(p.inputs.len(), p.targets.len());
    }

    #[test]
    fn alternating_series_averages_to_midpoint() {
        let s = series((0..300).map(|i| if i % 2 == 0 { 1.0 } else { 4.0 }).collect());
        let p = build_s2s_targets(&s, &["v".into()], 336, 336).unwrap();
        assert!(p.targets.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn step_must_divide_window() {
        let s = series(vec![0.0; 10]);
        assert!(build_s2s_targets(&s, &["v".into()], 335, 336).is_err());
    }

    #[test]
    fn short_series_skips_everything() {
        let s = series(vec![1.0; 50]);
        let p = build_s2s_targets(&s, &["v".into()], 336, 336).unwrap();
        assert_eq!(p.targets.len(), 0);
        assert_eq!(p.skipped, 50);
    }
}
