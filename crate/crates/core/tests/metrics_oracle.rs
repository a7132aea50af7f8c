//! Metrics against naive triple-loop oracles on random instances.

use gridformer_core::grid::GridSpec;
use gridformer_core::metrics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const INSTANCES: u64 = 50;

struct Case {
    n: usize,
    h: usize,
    w: usize,
    lats: Vec<f64>,
    pred: Vec<f64>,
    truth: Vec<f64>,
}

impl Case {
    fn random(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h, w) = (rng.random_range(1..5), rng.random_range(2..7), rng.random_range(1..9));
        let lats = (0..h).map(|_| rng.random_range(-89.0..89.0)).collect();
        let mut field = |offset: f64| (0..n * h * w).map(|_| offset + rng.random_range(-2.0..2.0)).collect();
        let truth = field(3.0);
        let pred = field(3.0);
        Case { n, h, w, lats, pred, truth }
    }

    fn at(v: &[f64], (h, w): (usize, usize), n: usize, i: usize, j: usize) -> f64 {
        v[(n * h + i) * w + j]
    }

    fn l(&self) -> Vec<f64> {
        let cos: Vec<f64> = self.lats.iter().map(|l| l.to_radians().cos()).collect();
        let mean: f64 = cos.iter().sum::<f64>() / self.h as f64;
        cos.iter().map(|c| c / mean).collect()
    }

    fn p(&self, n: usize, i: usize, j: usize) -> f64 {
        Self::at(&self.pred, (self.h, self.w), n, i, j)
    }

    fn t(&self, n: usize, i: usize, j: usize) -> f64 {
        Self::at(&self.truth, (self.h, self.w), n, i, j)
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.h).flat_map(move |i| (0..self.w).map(move |j| (i, j)))
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * (1.0 + b.abs())
}

fn oracle_lat_mse(c: &Case) -> f64 {
    let l = c.l();
    let mut s = 0.0;
    for n in 0..c.n {
        for (i, j) in c.cells() {
            s += l[i] * (c.p(n, i, j) - c.t(n, i, j)).powi(2);
        }
    }
    s / (c.n * c.h * c.w) as f64
}

fn oracle_lat_rmse(c: &Case) -> f64 {
    let l = c.l();
    let mut total = 0.0;
    for n in 0..c.n {
        let mut s = 0.0;
        for (i, j) in c.cells() {
            s += l[i] * (c.p(n, i, j) - c.t(n, i, j)).powi(2);
        }
        total += (s / (c.h * c.w) as f64).sqrt();
    }
    total / c.n as f64
}

fn oracle_clim(c: &Case) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, j) in c.cells() {
        out.push((0..c.n).map(|n| c.t(n, i, j)).sum::<f64>() / c.n as f64);
    }
    out
}

fn oracle_acc(c: &Case, clim: &[f64]) -> f64 {
    let l = c.l();
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for n in 0..c.n {
        for (i, j) in c.cells() {
            let a = c.p(n, i, j) - clim[i * c.w + j];
            let b = c.t(n, i, j) - clim[i * c.w + j];
            xy += l[i] * a * b;
            xx += l[i] * a * a;
            yy += l[i] * b * b;
        }
    }
    xy / (xx * yy).sqrt()
}

fn oracle_global(c: &Case, v: &[f64], n: usize) -> f64 {
    let l = c.l();
    c.cells().map(|(i, j)| l[i] * Case::at(v, (c.h, c.w), n, i, j)).sum::<f64>() / (c.h * c.w) as f64
}

fn oracle_nrmse(c: &Case) -> (f64, f64) {
    let l = c.l();
    let norm = (0..c.n).map(|n| oracle_global(c, &c.truth, n)).sum::<f64>() / c.n as f64;
    let mut spatial = 0.0;
    for (i, j) in c.cells() {
        let pm = (0..c.n).map(|n| c.p(n, i, j)).sum::<f64>() / c.n as f64;
        let tm = (0..c.n).map(|n| c.t(n, i, j)).sum::<f64>() / c.n as f64;
        spatial += l[i] * (pm - tm).powi(2);
    }
    let spatial = (spatial / (c.h * c.w) as f64).sqrt() / norm;
    let global = ((0..c.n)
        .map(|n| (oracle_global(c, &c.pred, n) - oracle_global(c, &c.truth, n)).powi(2))
        .sum::<f64>()
        / c.n as f64)
        .sqrt()
        / norm;
    (spatial, global)
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut c = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for k in 0..x.len() {
        c += (x[k] - mx) * (y[k] - my);
        vx += (x[k] - mx).powi(2);
        vy += (y[k] - my).powi(2);
    }
    c / (vx * vy).sqrt()
}

#[test]
fn latitude_weights_average_to_one() {
    for seed in 0..INSTANCES {
        let c = Case::random(seed);
        let w = lat_weights_from_lats(&c.lats).unwrap();
        assert!(close(w.iter().sum::<f64>() / w.len() as f64, 1.0));
        for (a, b) in w.iter().zip(c.l()) {
            assert!(close(*a, b));
        }
    }
    let g = GridSpec::equiangular(32, 64);
    let w = lat_weights(&g).unwrap();
    assert!(close(w.iter().sum::<f64>(), 32.0));
    assert!(lat_weights_from_lats(&[90.0, -90.0]).is_err());
}

#[test]
fn field_metrics_match_oracles() {
    for seed in 0..INSTANCES {
        let c = Case::random(seed);
        let w = lat_weights_from_lats(&c.lats).unwrap();
        assert!(close(lat_mse(&c.pred, &c.truth, &w, c.w).unwrap(), oracle_lat_mse(&c)), "lat_mse {seed}");
        assert!(close(lat_rmse(&c.pred, &c.truth, &w, c.w).unwrap(), oracle_lat_rmse(&c)), "lat_rmse {seed}");
        let clim = climatology(&c.truth, c.h * c.w).unwrap();
        for (a, b) in clim.iter().zip(oracle_clim(&c)) {
            assert!(close(*a, b));
        }
        // Climatology from truth makes anomalies degenerate at N = 1.
        if c.n > 1 {
            let a = acc(&c.pred, &c.truth, &clim, &w, c.w).unwrap();
            assert!(close(a, oracle_acc(&c, &clim)), "acc {seed}");
        }
        let (s, g) = oracle_nrmse(&c);
        let ns = nrmse_spatial(&c.pred, &c.truth, &w, c.w).unwrap();
        let ng = nrmse_global(&c.pred, &c.truth, &w, c.w).unwrap();
        assert!(close(ns, s) && close(ng, g), "nrmse {seed}");
        assert!(close(trmse(ns, ng, TRMSE_ALPHA), s + 5.0 * g));
        let bias = c.pred.iter().sum::<f64>() / c.pred.len() as f64 - c.truth.iter().sum::<f64>() / c.truth.len() as f64;
        assert!(close(mean_bias(&c.pred, &c.truth).unwrap(), bias));
        assert!(close(pearson(&c.pred, &c.truth).unwrap(), oracle_pearson(&c.pred, &c.truth)));
    }
}

#[test]
fn perfect_forecasts() {
    for seed in 0..INSTANCES {
        let c = Case::random(seed);
        let w = lat_weights_from_lats(&c.lats).unwrap();
        assert_eq!(lat_mse(&c.truth, &c.truth, &w, c.w).unwrap(), 0.0);
        assert_eq!(lat_rmse(&c.truth, &c.truth, &w, c.w).unwrap(), 0.0);
        assert_eq!(nrmse_global(&c.truth, &c.truth, &w, c.w).unwrap(), 0.0);
        assert!(close(pearson(&c.truth, &c.truth).unwrap(), 1.0));
        if c.n > 1 {
            let clim = climatology(&c.truth, c.h * c.w).unwrap();
            assert!(close(acc(&c.truth, &c.truth, &clim, &w, c.w).unwrap(), 1.0));
        }
    }
}

#[test]
fn affine_invariances() {
    for seed in 0..INSTANCES {
        let c = Case::random(seed);
        let w = lat_weights_from_lats(&c.lats).unwrap();
        let shift = |v: &[f64], s: f64| v.iter().map(|x| x + s).collect::<Vec<_>>();
        let scale = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
        // Shifting both fields leaves error metrics unchanged.
        let (p2, t2) = (shift(&c.pred, 7.5), shift(&c.truth, 7.5));
        assert!(close(lat_mse(&p2, &t2, &w, c.w).unwrap(), lat_mse(&c.pred, &c.truth, &w, c.w).unwrap()));
        // Scaling both fields scales RMSE linearly.
        let (p3, t3) = (scale(&c.pred, 2.5), scale(&c.truth, 2.5));
        assert!(close(
            lat_rmse(&p3, &t3, &w, c.w).unwrap(),
            2.5 * lat_rmse(&c.pred, &c.truth, &w, c.w).unwrap()
        ));
        // Pearson ignores positive affine maps of either argument.
        let p4 = shift(&scale(&c.pred, 3.0), -1.0);
        assert!(close(pearson(&p4, &c.truth).unwrap(), pearson(&c.pred, &c.truth).unwrap()));
        // Normalized projection errors are scale-free.
        assert!(close(
            nrmse_spatial(&p3, &t3, &w, c.w).unwrap(),
            nrmse_spatial(&c.pred, &c.truth, &w, c.w).unwrap()
        ));
        // Bias shifts with the prediction.
        assert!(close(
            mean_bias(&shift(&c.pred, 0.3), &c.truth).unwrap(),
            mean_bias(&c.pred, &c.truth).unwrap() + 0.3
        ));
        if c.n > 1 {
            let clim = climatology(&c.truth, c.h * c.w).unwrap();
            let clim3 = scale(&clim, 2.5);
            assert!(close(
                acc(&p3, &t3, &clim3, &w, c.w).unwrap(),
                acc(&c.pred, &c.truth, &clim, &w, c.w).unwrap()
            ));
        }
    }
}

#[test]
fn invalid_shapes_are_rejected() {
    let w = [1.0, 1.0];
    assert!(lat_mse(&[0.0; 4], &[0.0; 3], &w, 2).is_err());
    assert!(lat_mse(&[0.0; 6], &[0.0; 6], &w, 2).is_err());
    assert!(acc(&[0.0; 4], &[1.0; 4], &[0.0; 3], &w, 2).is_err());
    assert!(nrmse_global(&[1.0; 4], &[0.0; 4], &w, 2).is_err());
    assert!(pearson(&[], &[]).is_err());
}

#[test]
fn report_serializes_one_row_per_metric() {
    let mut r = MetricReport::default();
    r.push("forecast", "t2m", Some(72), "rmse", 1.5);
    r.push("projection", "tas", None, "trmse", 0.25);
    let csv = r.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("task,variable,lead_hours,metric,value"));
    assert_eq!(lines.next(), Some("forecast,t2m,72,rmse,1.5"));
    assert_eq!(lines.next(), Some("projection,tas,,trmse,0.25"));
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(r.get("t2m", Some(72), "rmse"), Some(1.5));
}
