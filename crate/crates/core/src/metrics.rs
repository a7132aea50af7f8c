//! Latitude-weighted objectives and evaluation metrics.
//!
//! Fields are flat row-major `[N, H, W]` slices of `N` forecasts (or
//! forecast×variable pairs); `weights` holds one latitude weight per row, so
//! `H = weights.len()` and `W` is passed explicitly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::tensor::Scalar;

/// Weight on the global-mean term of the total projection error.
pub const TRMSE_ALPHA: f64 = 5.0;

/// `L(i) = cos(lat_i) / mean_j cos(lat_j)`.
pub fn lat_weights_from_lats(lats: &[f64]) -> Result<Vec<f64>> {
    if lats.is_empty() {
        return Err(Error::invalid("no latitudes"));
    }
    let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos().max(0.0)).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    if !(mean > 1e-12) {
        return Err(Error::invalid("latitude cosines are all zero"));
    }
    Ok(cos.into_iter().map(|c| c / mean).collect())
}

pub fn lat_weights(grid: &GridSpec) -> Result<Vec<f64>> {
    lat_weights_from_lats(grid.lats())
}

struct Dims {
    n: usize,
    h: usize,
    w: usize,
}

fn dims(pred: &[f64], truth: &[f64], weights: &[f64], width: usize) -> Result<Dims> {
    let h = weights.len();
    if pred.len() != truth.len() {
        return Err(Error::shape("metric", &[pred.len()], &[truth.len()]));
    }
    if h == 0 || width == 0 || pred.is_empty() || pred.len() % (h * width) != 0 {
        return Err(Error::invalid(format!(
            "{} values do not form whole {h}×{width} fields",
            pred.len()
        )));
    }
    Ok(Dims {
        n: pred.len() / (h * width),
        h,
        w: width,
    })
}

/// Row weight of flat index `idx`.
#[inline]
fn row_weight(weights: &[f64], width: usize, idx: usize) -> f64 {
    weights[(idx / width) % weights.len()]
}

/// `(1/(N·H·W)) Σ L(i)·(pred − truth)²`.
pub fn lat_mse(pred: &[f64], truth: &[f64], weights: &[f64], width: usize) -> Result<f64> {
    dims(pred, truth, weights, width)?;
    let s: f64 = pred
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(k, (p, t))| row_weight(weights, width, k) * (p - t).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean over forecasts of the per-forecast weighted RMSE.
pub fn lat_rmse(pred: &[f64], truth: &[f64], weights: &[f64], width: usize) -> Result<f64> {
    let d = dims(pred, truth, weights, width)?;
    let cells = d.h * d.w;
    let total: f64 = (0..d.n)
        .map(|k| {
            let r = k * cells..(k + 1) * cells;
            lat_mse(&pred[r.clone()], &truth[r], weights, width).map(f64::sqrt)
        })
        .sum::<Result<f64>>()?;
    Ok(total / d.n as f64)
}

/// Anomaly correlation against `climatology` (`[H, W]`), pooled over all
/// forecasts and grid points.
pub fn acc(pred: &[f64], truth: &[f64], climatology: &[f64], weights: &[f64], width: usize) -> Result<f64> {
    let d = dims(pred, truth, weights, width)?;
    if climatology.len() != d.h * d.w {
        return Err(Error::shape("acc", &[d.h, d.w], &[climatology.len()]));
    }
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        let c = climatology[k % climatology.len()];
        let l = row_weight(weights, width, k);
        let (a, b) = (p - c, t - c);
        xy += l * a * b;
        xx += l * a * a;
        yy += l * b * b;
    }
    if xx <= 0.0 || yy <= 0.0 {
        return Err(Error::invalid("anomaly variance is zero"));
    }
    Ok(xy / (xx * yy).sqrt())
}

/// Temporal mean of `[N, H, W]` truth fields, `[H, W]`.
pub fn climatology(truth: &[f64], cells: usize) -> Result<Vec<f64>> {
    if cells == 0 || truth.is_empty() || truth.len() % cells != 0 {
        return Err(Error::invalid("climatology needs whole fields"));
    }
    let n = truth.len() / cells;
    let mut c = vec![0.0; cells];
    for f in truth.chunks_exact(cells) {
        for (a, b) in c.iter_mut().zip(f) {
            *a += b;
        }
    }
    c.iter_mut().for_each(|a| *a /= n as f64);
    Ok(c)
}

/// `⟨A⟩ = (1/(H·W)) Σ L(i)·A_ij` of one field.
fn global_mean(field: &[f64], weights: &[f64], width: usize) -> f64 {
    field
        .iter()
        .enumerate()
        .map(|(k, a)| row_weight(weights, width, k) * a)
        .sum::<f64>()
        / field.len() as f64
}

fn mean_truth_global(truth: &[f64], weights: &[f64], d: &Dims) -> Result<f64> {
    let cells = d.h * d.w;
    let m = truth
        .chunks_exact(cells)
        .map(|f| global_mean(f, weights, d.w))
        .sum::<f64>()
        / d.n as f64;
    if m == 0.0 {
        return Err(Error::invalid("normalizing global mean of truth is zero"));
    }
    Ok(m)
}

/// Spatial NRMSE: RMSE of the time-mean maps, normalized by the mean
/// weighted global mean of truth.
pub fn nrmse_spatial(pred: &[f64], truth: &[f64], weights: &[f64], width: usize) -> Result<f64> {
    let d = dims(pred, truth, weights, width)?;
    let cells = d.h * d.w;
    let pm = climatology(pred, cells)?;
    let tm = climatology(truth, cells)?;
    let sq: Vec<f64> = pm.iter().zip(&tm).map(|(a, b)| (a - b).powi(2)).collect();
    let num = global_mean(&sq, weights, width).sqrt();
    Ok(num / mean_truth_global(truth, weights, &d)?)
}

/// Global NRMSE: RMSE over time of the weighted global means.
pub fn nrmse_global(pred: &[f64], truth: &[f64], weights: &[f64], width: usize) -> Result<f64> {
    let d = dims(pred, truth, weights, width)?;
    let cells = d.h * d.w;
    let mse = pred
        .chunks_exact(cells)
        .zip(truth.chunks_exact(cells))
        .map(|(p, t)| (global_mean(p, weights, width) - global_mean(t, weights, width)).powi(2))
        .sum::<f64>()
        / d.n as f64;
    Ok(mse.sqrt() / mean_truth_global(truth, weights, &d)?)
}

pub fn trmse(spatial: f64, global: f64, alpha: f64) -> f64 {
    spatial + alpha * global
}

/// Unweighted `mean(pred) − mean(truth)`.
pub fn mean_bias(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("mean_bias", &[pred.len()], &[truth.len()]));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().sum::<f64>() / n - truth.iter().sum::<f64>() / n)
}

pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape("pearson", &[pred.len()], &[truth.len()]));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut c, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        c += (p - mp) * (t - mt);
        vp += (p - mp).powi(2);
        vt += (t - mt).powi(2);
    }
    if vp <= 0.0 || vt <= 0.0 {
        return Err(Error::invalid("pearson correlation of a constant array"));
    }
    Ok(c / (vp * vt).sqrt())
}

/// Differentiable latitude-weighted MSE of `[B, V, H, W]` graph values.
pub fn lat_mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, truth: Var, weights: &[f64]) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    if s.len() < 2 || s[s.len() - 2] != weights.len() {
        return Err(Error::shape("lat_mse_loss", &s, &[weights.len()]));
    }
    let w = s[s.len() - 1];
    let diff = g.sub(pred, truth)?;
    let sq = g.square(diff)?;
    let lw: Vec<T> = weights.iter().flat_map(|&l| std::iter::repeat_n(T::cst(l), w)).collect();
    let lw = g.constant_from(vec![weights.len(), w], lw)?;
    let weighted = g.mul(sq, lw)?;
    g.mean_all(weighted)
}

/// Unweighted MSE, used where the objective drops the latitude term.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var> {
    let diff = g.sub(pred, truth)?;
    let sq = g.square(diff)?;
    g.mean_all(sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub variable: String,
    /// Absent for tasks without a lead time (projection, downscaling).
    pub lead_hours: Option<u32>,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, task: &str, variable: &str, lead_hours: Option<u32>, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            task: task.into(),
            variable: variable.into(),
            lead_hours,
            metric: metric.into(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, variable: &str, lead_hours: Option<u32>, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variable == variable && r.lead_hours == lead_hours && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::write(dir.join("metrics.csv"), self.to_csv()?)?;
        fs::write(dir.join("metrics.json"), self.to_json()?)?;
        Ok(())
    }
}
