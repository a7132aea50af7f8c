use gridformer_core::grid::*;
use gridformer_core::model::*;
use gridformer_core::training::*;
use gridformer_core::ParamStore;

fn synth(vars: &[&str], statics: &[&str], steps: usize, family: u64, seed: u64) -> Dataset {
    generate_synthetic(
        &SynthSpec {
            height: 8,
            width: 16,
            variables: vars.iter().map(|s| s.to_string()).collect(),
            static_variables: statics.iter().map(|s| s.to_string()).collect(),
            step_hours: 6,
            steps,
            start_hour: 0,
            family: Family {
                seed: family,
                noise: 0.05,
                coupling: 0.3,
                ..Family::default()
            },
        },
        seed,
    )
    .unwrap()
}

fn source(name: &str, ds: &Dataset) -> PretrainSource {
    let s = Splits::from_dataset(ds, [0.8, 0.2, 0.0]).unwrap();
    PretrainSource {
        name: name.into(),
        train: s.train,
        val: s.val,
    }
}

fn short_pretrain(steps: usize) -> PretrainConfig {
    let mut pc = PretrainConfig::default();
    pc.fit.steps = steps;
    pc.fit.eval_every = steps;
    pc.fit.batch_size = 2;
    pc.optim.total_steps = steps;
    pc.optim.warmup_steps = 1;
    pc.val_pairs = 4;
    pc
}

fn short_finetune(steps: usize) -> FinetuneConfig {
    let mut fc = FinetuneConfig::default();
    fc.fit.steps = steps;
    fc.fit.eval_every = steps;
    fc.fit.batch_size = 2;
    fc.val_pairs = 4;
    fc
}

fn toy(vars: &[&str]) -> ModelConfig {
    ModelConfig::toy(VariableVocabulary::new(vars.iter().copied()).unwrap())
}

fn changed(a: &ParamStore<f32>, b: &ParamStore<f32>, name: &str) -> bool {
    a.get(name).unwrap().data() != b.get(name).unwrap().data()
}

#[test]
fn source_missing_a_variable_still_trains() {
    let cfg = toy(&["a", "b", "m"]);
    let full = synth(&["a", "b", "m"], &["m"], 80, 1, 0);
    let partial = synth(&["a", "m"], &["m"], 80, 2, 0);
    let init = init_params(&cfg, 0).unwrap();
    let out = pretrain(&cfg, init.clone(), &[source("full", &full), source("partial", &partial)], &short_pretrain(4), 0)
        .unwrap();
    assert_eq!(out.fit.steps_run, 4);
    assert!(out.fit.log.iter().all(|r| r.train_loss.is_finite()));
    assert!(changed(&init, &out.fit.params, "var_embed.b.weight"));
}

#[test]
fn disjoint_sources_both_update_their_embeddings() {
    let cfg = toy(&["a", "b"]);
    let only_a = synth(&["a"], &[], 60, 1, 0);
    let only_b = synth(&["b"], &[], 60, 2, 0);
    let init = init_params(&cfg, 0).unwrap();
    let sources = [source("a", &only_a), source("b", &only_b)];
    // Warmup starts at lr 0, so source `a`'s first batch moves nothing.
    let two = pretrain(&cfg, init.clone(), &sources, &short_pretrain(2), 0).unwrap();
    assert!(!changed(&init, &two.fit.params, "var_embed.a.weight"));
    assert!(changed(&init, &two.fit.params, "var_embed.b.weight"));
    let three = pretrain(&cfg, init.clone(), &sources, &short_pretrain(3), 0).unwrap();
    assert!(changed(&init, &three.fit.params, "var_embed.a.weight"));
    assert!(changed(&init, &three.fit.params, "var_embed.b.weight"));
}

#[test]
fn pretraining_is_seed_deterministic() {
    let cfg = toy(&["a", "m"]);
    let ds = synth(&["a", "m"], &["m"], 60, 1, 0);
    let run = |seed| {
        let out = pretrain(&cfg, init_params(&cfg, seed).unwrap(), &[source("s", &ds)], &short_pretrain(3), seed).unwrap();
        out.fit.params
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn frozen_projection_updates_only_norms_and_new_layers() {
    let cfg = toy(&["a", "b"]);
    let data = generate_projection(
        &ProjectionSpec {
            height: 8,
            width: 16,
            forcings: vec!["co2".into(), "so2".into()],
            targets: vec!["tas".into()],
            years: 30,
            response_window: 5,
            noise: 0.0,
            family_seed: 0,
        },
        0,
    )
    .unwrap();
    let task = projection_task(&data, 5, [0.6, 0.2, 0.2]).unwrap();
    let init = init_params(&cfg, 0).unwrap();
    let mut spec = ProtocolSpec::new(ProtocolMode::ProjectionFrozen);
    spec.history = 5;
    let out = finetune_projection(&cfg, init.clone(), &spec, &task, &short_finetune(3), 0).unwrap();
    let p = &out.fit.params;
    for name in ["blocks.0.attn.q.weight", "blocks.0.mlp.fc1.weight", "agg.attn.v.weight", "pos_embed", "lead_embed.weight"] {
        assert!(!changed(&init, p, name), "{name} moved");
    }
    for name in ["blocks.0.norm1.weight", "norm.bias"] {
        assert!(changed(&init, p, name), "{name} frozen");
    }
    // New layers train too: compare against a run with zero learning rate.
    let mut still = short_finetune(3);
    still.peak_lr = Some(0.0);
    let frozen_at_init = finetune_projection(&cfg, init.clone(), &spec, &task, &still, 0).unwrap();
    for name in ["var_embed.co2.weight", "var_pos.so2", "proj.head.weight", "proj.query"] {
        assert!(changed(&frozen_at_init.fit.params, p, name), "{name} frozen");
    }
    for metric in ["nrmse_s", "nrmse_g", "trmse", "rmse"] {
        assert!(out.report.get("tas", None, metric).unwrap().is_finite());
    }
    spec.mode = ProtocolMode::ProjectionFull;
    let full = finetune_projection(&cfg, init.clone(), &spec, &task, &short_finetune(3), 0).unwrap();
    assert!(changed(&init, &full.fit.params, "blocks.0.attn.q.weight"));
}

fn forecast_splits(steps: usize) -> Splits {
    Splits::from_dataset(&synth(&["a", "b", "m"], &["m"], steps, 9, 1), [0.5, 0.2, 0.3]).unwrap()
}

#[test]
fn global_regional_run_matches_all_variables_step_for_step() {
    let cfg = toy(&["a", "b", "m"]);
    let data = forecast_splits(120);
    let init = init_params(&cfg, 3).unwrap();
    let fc = short_finetune(4);
    let all = finetune_forecast(&cfg, init.clone(), &ProtocolSpec::new(ProtocolMode::AllVars), &data, &fc, 3).unwrap();
    let mut spec = ProtocolSpec::new(ProtocolMode::Regional);
    spec.region = Some(Region::GLOBE);
    let reg = finetune_forecast(&cfg, init, &spec, &data, &fc, 3).unwrap();
    assert_eq!(all.fit.log, reg.fit.log);
    assert_eq!(all.fit.params, reg.fit.params);
    assert_eq!(all.report, reg.report);
}

#[test]
fn regional_window_trains_on_the_crop() {
    let cfg = toy(&["a", "b", "m"]);
    let data = forecast_splits(120);
    let mut spec = ProtocolSpec::new(ProtocolMode::Regional);
    // Rows 2..6 and columns 4..12 of the 8×16 grid.
    spec.region = Some(Region {
        lat_min: -40.0,
        lat_max: 40.0,
        lon_min: 90.0,
        lon_max: 260.0,
    });
    let out = finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &spec, &data, &short_finetune(2), 0).unwrap();
    assert!(out.report.get("a", Some(72), "rmse").unwrap().is_finite());
    spec.region = Some(Region {
        lat_min: -40.0,
        lat_max: 40.0,
        lon_min: 60.0,
        lon_max: 240.0,
    });
    assert!(finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &spec, &data, &short_finetune(2), 0).is_err());
}

#[test]
fn continuous_mode_flags_leads_outside_training_range() {
    let cfg = toy(&["a", "b", "m"]);
    let data = forecast_splits(300);
    let mut spec = ProtocolSpec::new(ProtocolMode::Continuous);
    spec.eval_leads = vec![24, 168, 336];
    let out = finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &spec, &data, &short_finetune(2), 0).unwrap();
    let task = |lead: u32| {
        out.report
            .rows
            .iter()
            .find(|r| r.lead_hours == Some(lead))
            .map(|r| r.task.clone())
            .unwrap()
    };
    assert_eq!(task(24), "forecast");
    assert_eq!(task(168), "forecast");
    assert_eq!(task(336), "forecast_extrapolated");
}

#[test]
fn iterative_mode_predicts_every_variable_by_rollout() {
    let cfg = toy(&["a", "b", "m"]);
    let data = forecast_splits(120);
    let mut spec = ProtocolSpec::new(ProtocolMode::Iterative);
    spec.eval_leads = vec![6, 24];
    let out = finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &spec, &data, &short_finetune(2), 0).unwrap();
    for var in ["a", "b"] {
        for lead in [6, 24] {
            assert!(out.report.get(var, Some(lead), "rmse").unwrap().is_finite());
        }
    }
    spec.targets = vec!["a".into()];
    assert!(finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &spec, &data, &short_finetune(2), 0).is_err());
}

/// With time-invariant data a rollout stays within `k` times the one-step
/// error of the trained model, step by step.
#[test]
fn rollout_error_grows_at_most_linearly_on_identity_dynamics() {
    let cfg = toy(&["a"]);
    let grid = GridSpec::equiangular(8, 16);
    let field: Vec<f32> = grid.lats().iter().flat_map(|&la| grid.lons().iter().map(move |&lo| (la.to_radians().sin() + lo.to_radians().cos()) as f32)).collect();
    let mut data = Vec::new();
    for t in 0..80 {
        data.extend(field.iter().map(|x| x + 1e-3 * (t % 3) as f32));
    }
    let ds = Dataset::new(grid, vec!["a".into()], TimeAxis { start_hour: 0, step_hours: 6, count: 80 }, data).unwrap();
    let splits = Splits::from_dataset(&ds, [0.6, 0.2, 0.2]).unwrap();
    let mut spec = ProtocolSpec::new(ProtocolMode::Iterative);
    spec.eval_leads = vec![6, 12, 24];
    let mut fc = short_finetune(150);
    fc.peak_lr = Some(1e-3);
    fc.fit.batch_size = 4;
    let out = finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &spec, &splits, &fc, 0).unwrap();
    let rmse = |lead| out.report.get("a", Some(lead), "rmse").unwrap();
    let one = rmse(6);
    assert!(one < 0.5, "one-step rmse {one}");
    for (k, lead) in [(2.0, 12), (4.0, 24)] {
        assert!(rmse(lead) <= k * one + 1e-6, "{lead} h: {} vs {}", rmse(lead), k * one);
    }
}

#[test]
fn direct_mode_validates_its_target() {
    let cfg = toy(&["a", "b", "m"]);
    let data = forecast_splits(120);
    let init = init_params(&cfg, 0).unwrap();
    let fc = short_finetune(1);
    let mut spec = ProtocolSpec::new(ProtocolMode::Direct);
    assert!(finetune_forecast(&cfg, init.clone(), &spec, &data, &fc, 0).is_err());
    spec.targets = vec!["zz".into()];
    assert!(finetune_forecast(&cfg, init.clone(), &spec, &data, &fc, 0).is_err());
    spec.targets = vec!["m".into()];
    assert!(finetune_forecast(&cfg, init.clone(), &spec, &data, &fc, 0).is_err());
    spec.targets = vec!["b".into()];
    let out = finetune_forecast(&cfg, init, &spec, &data, &fc, 0).unwrap();
    assert!(out.report.get("b", Some(72), "rmse").is_some());
    assert!(out.report.get("a", Some(72), "rmse").is_none());
}

#[test]
fn unseen_finetuning_variables_are_adopted() {
    let cfg = toy(&["a", "m"]);
    let data = Splits::from_dataset(&synth(&["a", "c", "m"], &["m"], 120, 4, 0), [0.5, 0.2, 0.3]).unwrap();
    let out = finetune_forecast(&cfg, init_params(&cfg, 0).unwrap(), &ProtocolSpec::new(ProtocolMode::AllVars), &data, &short_finetune(2), 0)
        .unwrap();
    assert!(out.config.vocabulary.contains("c"));
    assert!(out.fit.params.get("var_embed.c.weight").is_some());
    assert!(out.report.get("c", Some(72), "acc").is_some());
}

#[test]
fn downscaling_runs_on_a_finer_grid() {
    let cfg = toy(&["a", "m"]);
    let fine = generate_synthetic(
        &SynthSpec {
            height: 16,
            width: 32,
            variables: vec!["a".into()],
            static_variables: vec![],
            step_hours: 6,
            steps: 60,
            start_hour: 0,
            family: Family::default(),
        },
        0,
    )
    .unwrap();
    let coarse = regrid_dataset(&fine, &GridSpec::equiangular(8, 16)).unwrap();
    let splits = downscale_splits(&coarse, &fine, [0.6, 0.2, 0.2]).unwrap();
    let spec = ProtocolSpec::new(ProtocolMode::Downscale);
    let out = finetune_downscale(&cfg, init_params(&cfg, 0).unwrap(), &spec, &splits, &short_finetune(3), 0).unwrap();
    assert_eq!((out.config.grid_height, out.config.grid_width), (16, 32));
    for metric in ["rmse", "pearson", "mean_bias"] {
        assert!(out.report.get("a", None, metric).unwrap().is_finite());
    }
}

#[test]
fn step_log_is_written_as_csv() {
    let cfg = toy(&["a"]);
    let ds = synth(&["a"], &[], 60, 1, 0);
    let out = pretrain(&cfg, init_params(&cfg, 0).unwrap(), &[source("s", &ds)], &short_pretrain(3), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steps.csv");
    write_step_log(&path, &out.fit.log).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("step,lr,train_loss,val_loss"));
}
