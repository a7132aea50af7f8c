use std::fs;
use std::path::{Path, PathBuf};

use gridformer_core::gradcheck::gradient_check;
use gridformer_core::grid::{
    build_s2s_targets, compute_norm_stats, crop_dataset, denormalize, generate_projection, normalize, regrid_dataset,
    synth::{coarsen_with_bias, ProjectionData},
    write_dataset, Dataset, GridSpec, NormStats, TimeAxis,
};
use gridformer_core::metrics::{acc, climatology, lat_mse, lat_mse_loss, lat_rmse, lat_weights, MetricReport};
use gridformer_core::model::{
    forward, init_params, load_checkpoint, save_checkpoint, Checkpoint, ForwardRequest, LeadTime, ModelConfig,
};
use gridformer_core::nn::normal_tensor;
use gridformer_core::training::{
    downscale_splits, evaluate_forecast, finetune_downscale, finetune_forecast, finetune_projection, pretrain,
    projection_task, rollout, write_step_log, FitOutcome, ForecastMethod, ProtocolMode, ProtocolSpec, PretrainSource,
    Splits,
};
use gridformer_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{absolute, absolutize_opt, derive_seed, load_raw, Method, ModelSection, RunConfig};
use crate::error::CliError;

/// Output directory of one run.
pub struct Run {
    pub out: PathBuf,
    pub command: &'static str,
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes the fully resolved configuration before any work starts.
    fn echo(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let text = toml::to_string(cfg).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
        fs::write(self.path("config.toml"), text)?;
        Ok(())
    }

    fn report(&self, report: &MetricReport) -> Result<(), CliError> {
        report.write(&self.out)?;
        for r in &report.rows {
            let lead = r.lead_hours.map(|l| format!(" @{l}h")).unwrap_or_default();
            println!("{} {}{} {} = {:.6}", r.task, r.variable, lead, r.metric, r.value);
        }
        Ok(())
    }

    fn checkpoint(&self, ck: &Checkpoint, fit: Option<&FitOutcome>) -> Result<(), CliError> {
        save_checkpoint(self.path("checkpoint.gtb"), ck)?;
        if let Some(f) = fit {
            write_step_log(self.path("steps.csv"), &f.log)?;
        }
        Ok(())
    }

    fn meta(&self, seed: u64, extra: serde_json::Value) -> serde_json::Value {
        let mut m = serde_json::json!({ "command": self.command, "seed": seed });
        if let (Some(m), serde_json::Value::Object(extra)) = (m.as_object_mut(), extra) {
            m.extend(extra);
        }
        m
    }
}

fn section<T>(s: &mut Option<T>, name: &str) -> Result<T, CliError>
where
    T: Clone,
{
    s.clone().ok_or_else(|| CliError::Validation(format!("config has no [{name}] section")))
}

fn model_section(cfg: &mut RunConfig) -> &mut ModelSection {
    cfg.model.get_or_insert_with(ModelSection::default)
}

/// Weights from a checkpoint, or a fresh model sized for the data.
fn model_for(
    cfg: &mut RunConfig,
    checkpoint: Option<&Path>,
    vars: &[String],
    grid: (usize, usize),
) -> Result<(ModelConfig, ParamStore<f32>, serde_json::Value), CliError> {
    match checkpoint {
        Some(p) => {
            let ck = read_checkpoint(p)?;
            Ok((ck.config, ck.params, ck.meta))
        }
        None => {
            let seed = derive_seed(cfg.seed, "init");
            let mc = model_section(cfg).resolve(vars, Some(grid))?;
            let params = init_params(&mc, seed)?;
            Ok((mc, params, serde_json::Value::Null))
        }
    }
}

fn read_checkpoint(p: &Path) -> Result<Checkpoint, CliError> {
    if !p.exists() {
        return Err(CliError::Validation(format!("no such checkpoint: {}", p.display())));
    }
    Ok(load_checkpoint(p)?)
}

fn dims(ds: &Dataset) -> (usize, usize) {
    (ds.grid.height(), ds.grid.width())
}

fn norm_meta(norm: Option<&NormStats>) -> serde_json::Value {
    serde_json::json!({ "norm": norm })
}

pub fn gen_data(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let s = section(&mut cfg.gen_data, "gen_data")?;
    if s.synth.is_none() && s.projection.is_none() {
        return Err(CliError::Validation("[gen_data] needs `synth` or `projection`".into()));
    }
    if s.coarse.is_some() && s.synth.is_none() {
        return Err(CliError::Validation("[gen_data.coarse] needs `synth`".into()));
    }
    run.echo(cfg)?;
    let mut report = MetricReport::default();
    if let Some(spec) = &s.synth {
        let ds = gridformer_core::grid::generate_synthetic(spec, derive_seed(cfg.seed, "synth"))?;
        write_dataset(run.path("data.gtb"), &ds)?;
        report.push("gen_data", "data", None, "frames", ds.len() as f64);
        if let Some(c) = &s.coarse {
            let coarse = coarsen_with_bias(&ds, &GridSpec::equiangular(c.height, c.width), c.bias)?;
            write_dataset(run.path("coarse.gtb"), &coarse)?;
            report.push("gen_data", "coarse", None, "frames", coarse.len() as f64);
        }
    }
    if let Some(spec) = &s.projection {
        let d = generate_projection(spec, derive_seed(cfg.seed, "projection"))?;
        write_dataset(run.path("forcing.gtb"), &d.forcing)?;
        write_dataset(run.path("response.gtb"), &d.response)?;
        report.push("gen_data", "forcing", None, "years", d.forcing.len() as f64);
    }
    run.report(&report)
}

pub fn regrid(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.regrid, "regrid")?;
    s.input = absolute(&s.input)?;
    cfg.regrid = Some(s.clone());
    let ds = load_raw(&s.input)?;
    run.echo(cfg)?;
    let out = regrid_dataset(&ds, &GridSpec::equiangular(s.height, s.width))?;
    write_dataset(run.path("regridded.gtb"), &out)?;
    let mut report = MetricReport::default();
    report.push("regrid", "all", None, "cells", out.grid.cells() as f64);
    run.report(&report)
}

pub fn crop(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.crop, "crop")?;
    s.input = absolute(&s.input)?;
    cfg.crop = Some(s.clone());
    let ds = load_raw(&s.input)?;
    run.echo(cfg)?;
    let out = crop_dataset(&ds, &s.region)?;
    write_dataset(run.path("cropped.gtb"), &out)?;
    let mut report = MetricReport::default();
    report.push("crop", "all", None, "cells", out.grid.cells() as f64);
    run.report(&report)
}

pub fn s2s_build(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.s2s, "s2s")?;
    s.input = absolute(&s.input)?;
    cfg.s2s = Some(s.clone());
    let ds = load_raw(&s.input)?;
    run.echo(cfg)?;
    let pairs = build_s2s_targets(&ds, &s.targets, s.lead_hours, s.window_hours)?;
    write_dataset(run.path("s2s_inputs.gtb"), &pairs.inputs)?;
    write_dataset(run.path("s2s_targets.gtb"), &pairs.targets)?;
    let mut report = MetricReport::default();
    report.push("s2s", "all", None, "pairs", pairs.targets.len() as f64);
    report.push("s2s", "all", None, "skipped", pairs.skipped as f64);
    run.report(&report)
}

pub fn pretrain_cmd(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.pretrain, "pretrain")?;
    if s.sources.is_empty() {
        return Err(CliError::Validation("[pretrain] needs at least one source".into()));
    }
    if !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
        return Err(CliError::Validation("val_fraction must lie in (0, 1)".into()));
    }
    absolutize_opt(&mut s.init)?;
    let mut sources = Vec::new();
    let mut vars: Vec<String> = Vec::new();
    let mut norms = serde_json::Map::new();
    for (i, src) in s.sources.iter_mut().enumerate() {
        src.absolutize()?;
        let name = src.name.get_or_insert_with(|| format!("source{i}")).clone();
        let ds = src.load(cfg.seed, &format!("pretrain/{name}"))?;
        let parts = ds.split(&[1.0 - s.val_fraction, s.val_fraction])?;
        let stats = compute_norm_stats(&parts[0])?;
        let mut it = parts.into_iter().map(|mut p| -> Result<Dataset, CliError> {
            normalize(&mut p, &stats)?;
            p.norm = Some(stats.clone());
            Ok(p)
        });
        let (train, val) = (it.next().expect("two parts")?, it.next().expect("two parts")?);
        for v in &train.variables {
            if !vars.contains(v) {
                vars.push(v.clone());
            }
        }
        norms.insert(name.clone(), serde_json::to_value(&stats).map_err(|e| CliError::Runtime(e.to_string()))?);
        sources.push(PretrainSource { name, train, val });
    }
    cfg.pretrain = Some(s.clone());
    let grid = dims(&sources[0].train);
    let (mc, params, _) = model_for(cfg, s.init.as_deref(), &vars, grid)?;
    run.echo(cfg)?;
    let out = pretrain(&mc, params, &sources, &s.train, cfg.seed)?;
    let mut report = MetricReport::default();
    report.push("pretrain", "all", None, "val_lat_mse", out.fit.best_val);
    report.push("pretrain", "all", None, "persistence_val_lat_mse", out.persistence_val);
    report.push("pretrain", "all", None, "steps_run", out.fit.steps_run as f64);
    let meta = run.meta(cfg.seed, serde_json::json!({ "source_norms": norms, "best_step": out.fit.best_step }));
    run.checkpoint(
        &Checkpoint {
            config: mc,
            params: out.fit.params.clone(),
            meta,
        },
        Some(&out.fit),
    )?;
    run.report(&report)
}

pub fn finetune(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.finetune, "finetune")?;
    absolutize_opt(&mut s.checkpoint)?;
    s.data.absolutize()?;
    cfg.finetune = Some(s.clone());
    s.protocol.validate()?;
    let ds = s.data.load(cfg.seed, "finetune")?;
    let splits = Splits::from_dataset(&ds, s.splits)?;
    let (mc, params, _) = model_for(cfg, s.checkpoint.as_deref(), &ds.variables, dims(&ds))?;
    run.echo(cfg)?;
    let out = finetune_forecast(&mc, params, &s.protocol, &splits, &s.train, cfg.seed)?;
    let meta = run.meta(
        cfg.seed,
        serde_json::json!({ "norm": splits.train.norm, "protocol": s.protocol }),
    );
    run.checkpoint(
        &Checkpoint {
            config: out.config,
            params: out.fit.params.clone(),
            meta,
        },
        Some(&out.fit),
    )?;
    run.report(&out.report)
}

/// Normalization for evaluating a checkpoint: the statistics it was trained
/// with when they cover the data, otherwise the data's own.
fn eval_norm(meta: &serde_json::Value, ds: &Dataset) -> Result<NormStats, CliError> {
    if let Some(n) = meta.get("norm").filter(|n| !n.is_null()) {
        let stats: NormStats =
            serde_json::from_value(n.clone()).map_err(|e| CliError::Validation(format!("checkpoint norm: {e}")))?;
        if stats.for_variables(&ds.variables).is_ok() {
            return Ok(stats);
        }
    }
    log::warn!("checkpoint carries no statistics for these variables; normalizing with the data's own");
    Ok(compute_norm_stats(ds)?)
}

pub fn evaluate(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.evaluate, "evaluate")?;
    absolutize_opt(&mut s.checkpoint)?;
    absolutize_opt(&mut s.predictions)?;
    s.data.absolutize()?;
    cfg.evaluate = Some(s.clone());
    let truth = s.data.load(cfg.seed, "evaluate")?;
    let targets = if s.targets.is_empty() { truth.dynamic_variables() } else { s.targets.clone() };
    if targets.is_empty() {
        return Err(CliError::Validation("nothing to evaluate: no dynamic variables".into()));
    }
    match (&s.predictions, &s.checkpoint) {
        (Some(p), _) => {
            let pred = load_raw(p)?;
            run.echo(cfg)?;
            run.report(&score_predictions(&pred, &truth, &targets)?)
        }
        (None, Some(c)) => {
            let ck = read_checkpoint(c)?;
            let mut ds = truth;
            let stats = eval_norm(&ck.meta, &ds)?;
            normalize(&mut ds, &stats)?;
            ds.norm = Some(stats);
            run.echo(cfg)?;
            let method = match s.method {
                Method::Direct => ForecastMethod::Direct,
                Method::Rollout => ForecastMethod::Rollout { step_hours: s.step_hours },
            };
            let inputs = ds.variables.clone();
            let report =
                evaluate_forecast(&ck.config, &ck.params, &ds, &inputs, &targets, &s.leads, None, method, "evaluate")?;
            run.report(&report)
        }
        (None, None) => Err(CliError::Validation("[evaluate] needs `checkpoint` or `predictions`".into())),
    }
}

/// RMSE, lat-MSE and ACC of a forecast series against the truth at the same
/// timestamps.
fn score_predictions(pred: &Dataset, truth: &Dataset, targets: &[String]) -> Result<MetricReport, CliError> {
    if pred.grid != truth.grid || pred.time != truth.time {
        return Err(CliError::Validation("predictions and truth cover different grids or times".into()));
    }
    let w = lat_weights(&truth.grid)?;
    let width = truth.grid.width();
    let cells = truth.grid.cells();
    let mut report = MetricReport::default();
    for name in targets {
        let (pi, ti) = (pred.var_index(name)?, truth.var_index(name)?);
        let collect = |ds: &Dataset, v: usize| -> Vec<f64> {
            (0..ds.len()).flat_map(|t| ds.field(t, v).iter().map(|&x| x as f64)).collect()
        };
        let (p, t) = (collect(pred, pi), collect(truth, ti));
        report.push("evaluate", name, None, "rmse", lat_rmse(&p, &t, &w, width)?);
        report.push("evaluate", name, None, "lat_mse", lat_mse(&p, &t, &w, width)?);
        let clim = climatology(&t, cells)?;
        match acc(&p, &t, &clim, &w, width) {
            Ok(a) => report.push("evaluate", name, None, "acc", a),
            Err(e) => log::warn!("acc undefined for {name}: {e}"),
        }
    }
    Ok(report)
}

pub fn rollout_cmd(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.rollout, "rollout")?;
    s.checkpoint = absolute(&s.checkpoint)?;
    s.data.absolutize()?;
    cfg.rollout = Some(s.clone());
    let ck = read_checkpoint(&s.checkpoint)?;
    let raw = s.data.load(cfg.seed, "rollout")?;
    if s.start >= raw.len() {
        return Err(CliError::Validation(format!("start {} is past the {} frames of the data", s.start, raw.len())));
    }
    let stats = eval_norm(&ck.meta, &raw)?;
    let mut ds = raw.clone();
    normalize(&mut ds, &stats)?;
    run.echo(cfg)?;
    let (h, w) = dims(&ds);
    let input = Tensor::new(vec![1, ds.num_vars(), h, w], ds.frame(s.start).to_vec())?;
    let r = rollout(&ck.config, &ck.params, &input, &ds.variables, &ds.static_variables, s.horizon_hours, s.step_hours)?;
    let mut frames = Vec::with_capacity(r.trajectory.len() * r.variables.len() * h * w);
    for f in &r.trajectory {
        frames.extend_from_slice(f.data());
    }
    let time = TimeAxis {
        start_hour: ds.time.hour(s.start) + s.step_hours as i64,
        step_hours: s.step_hours as i64,
        count: r.trajectory.len(),
    };
    let mut traj = Dataset::new(ds.grid.clone(), r.variables.clone(), time, frames)?;
    denormalize(&mut traj, &stats)?;
    write_dataset(run.path("trajectory.gtb"), &traj)?;

    // Score each step that the data still covers.
    let weights = lat_weights(&ds.grid)?;
    let mut report = MetricReport::default();
    report.push("rollout", "all", None, "forward_calls", r.forward_calls as f64);
    for k in 0..traj.len() {
        let hours = (k as i64 + 1) * s.step_hours as i64;
        if hours % raw.time.step_hours != 0 {
            continue;
        }
        let t = s.start + (hours / raw.time.step_hours) as usize;
        if t >= raw.len() {
            break;
        }
        for (v, name) in r.variables.iter().enumerate() {
            let p: Vec<f64> = traj.field(k, v).iter().map(|&x| x as f64).collect();
            let o: Vec<f64> = raw.field(t, raw.var_index(name)?).iter().map(|&x| x as f64).collect();
            report.push("rollout", name, Some(hours as u32), "rmse", lat_rmse(&p, &o, &weights, w)?);
        }
    }
    run.report(&report)
}

pub fn downscale(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.downscale, "downscale")?;
    absolutize_opt(&mut s.checkpoint)?;
    s.fine.absolutize()?;
    if let Some(c) = &mut s.coarse {
        c.absolutize()?;
    }
    cfg.downscale = Some(s.clone());
    let fine = s.fine.load(cfg.seed, "downscale/fine")?;
    let coarse = match (&s.coarse, &s.coarse_grid) {
        (Some(c), None) => c.load(cfg.seed, "downscale/coarse")?,
        (None, Some(g)) => coarsen_with_bias(&fine, &GridSpec::equiangular(g.height, g.width), g.bias)?,
        _ => return Err(CliError::Validation("[downscale] needs exactly one of `coarse` or `coarse_grid`".into())),
    };
    let splits = downscale_splits(&coarse, &fine, s.splits)?;
    let (mc, params, _) = model_for(cfg, s.checkpoint.as_deref(), &coarse.variables, dims(&fine))?;
    run.echo(cfg)?;
    let spec = ProtocolSpec::new(ProtocolMode::Downscale);
    let out = finetune_downscale(&mc, params, &spec, &splits, &s.train, cfg.seed)?;
    let meta = run.meta(cfg.seed, norm_meta(splits.train.target.norm.as_ref()));
    run.checkpoint(
        &Checkpoint {
            config: out.config,
            params: out.fit.params.clone(),
            meta,
        },
        Some(&out.fit),
    )?;
    run.report(&out.report)
}

pub fn project(cfg: &mut RunConfig, run: &Run) -> Result<(), CliError> {
    let mut s = section(&mut cfg.project, "project")?;
    absolutize_opt(&mut s.checkpoint)?;
    absolutize_opt(&mut s.forcing)?;
    absolutize_opt(&mut s.response)?;
    cfg.project = Some(s.clone());
    let data = match (&s.forcing, &s.response, &s.synth) {
        (Some(f), Some(r), None) => ProjectionData {
            forcing: load_raw(f)?,
            response: load_raw(r)?,
        },
        (None, None, Some(spec)) => generate_projection(spec, derive_seed(cfg.seed, "projection"))?,
        _ => {
            return Err(CliError::Validation(
                "[project] needs either `forcing` and `response` paths or `synth`".into(),
            ))
        }
    };
    let task = projection_task(&data, s.history, s.splits)?;
    let (mc, params, _) = model_for(cfg, s.checkpoint.as_deref(), &data.forcing.variables, dims(&data.forcing))?;
    run.echo(cfg)?;
    let mode = if s.frozen { ProtocolMode::ProjectionFrozen } else { ProtocolMode::ProjectionFull };
    let spec = ProtocolSpec {
        history: s.history,
        ..ProtocolSpec::new(mode)
    };
    let out = finetune_projection(&mc, params, &spec, &task, &s.train, cfg.seed)?;
    let meta = run.meta(
        cfg.seed,
        serde_json::json!({ "forcing_norm": task.forcing.norm, "response_norm": task.response.norm }),
    );
    run.checkpoint(
        &Checkpoint {
            config: out.config,
            params: out.fit.params.clone(),
            meta,
        },
        Some(&out.fit),
    )?;
    run.report(&out.report)
}

/// Central-difference check of every parameter of the configured model on
/// a random batch. Returns whether the worst error is under the threshold.
pub fn gradcheck(cfg: &mut RunConfig, run: &Run) -> Result<bool, CliError> {
    let s = cfg.gradcheck.get_or_insert_with(Default::default).clone();
    let mc = {
        let m = model_section(cfg);
        if m.variables.is_empty() {
            m.variables = vec!["a".into(), "b".into()];
        }
        m.resolve(&[], None)?
    };
    if s.batch == 0 || !(s.threshold > 0.0) {
        return Err(CliError::Validation("gradcheck batch and threshold must be positive".into()));
    }
    run.echo(cfg)?;
    let params = init_params::<f64>(&mc, derive_seed(cfg.seed, "init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gradcheck"));
    let shape = [s.batch, mc.vocabulary.len(), mc.grid_height, mc.grid_width];
    let input: Tensor<f32> = normal_tensor(&mut rng, &shape, 1.0);
    let target: Tensor<f64> = normal_tensor(&mut rng, &shape, 1.0);
    let weights = lat_weights(&GridSpec::equiangular(mc.grid_height, mc.grid_width))?;
    let vars: Vec<String> = mc.vocabulary.names().to_vec();
    let lead = vec![s.lead_hours; s.batch];
    let report = gradient_check(
        &params,
        |g, p| {
            let out = forward(
                g,
                &mc,
                p,
                &ForwardRequest {
                    input: &input,
                    input_vars: &vars,
                    targets: &vars,
                    lead: LeadTime::Hours(lead.clone()),
                    window: None,
                },
            )?;
            let t = g.constant(&target);
            lat_mse_loss(g, out.prediction, t, &weights)
        },
        s.eps,
    )?;
    println!("max relative error: {:.3e} (worst: {})", report.max_rel_error, report.worst_param);
    let mut metrics = MetricReport::default();
    for (name, err) in &report.per_param {
        metrics.push("gradcheck", name, None, "rel_error", *err);
    }
    metrics.push("gradcheck", "all", None, "max_rel_error", report.max_rel_error);
    metrics.write(&run.out)?;
    Ok(report.max_rel_error < s.threshold)
}
