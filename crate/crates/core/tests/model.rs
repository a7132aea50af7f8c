use gridformer_core::autograd::{Graph, Mode};
use gridformer_core::grid::VariableVocabulary;
use gridformer_core::model::climax::{aggregate_variables, embed_lead_time};
use gridformer_core::model::{
    add_projection_head, forward, init_params, interpolate_pos_embed, load_checkpoint, projection_forward,
    save_checkpoint, Checkpoint, ForwardRequest, LeadTime, ModelConfig, TokenWindow,
};
use gridformer_core::nn::{self, normal_tensor};
use gridformer_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab(n: usize) -> VariableVocabulary {
    VariableVocabulary::new((0..n).map(|i| format!("x{i}"))).unwrap()
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
    normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

fn run(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    input: &Tensor<f32>,
    vars: &[String],
    targets: &[String],
    window: Option<TokenWindow>,
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward(
        &mut g,
        cfg,
        params,
        &ForwardRequest {
            input,
            input_vars: vars,
            targets,
            lead: LeadTime::Hours(vec![48.0; input.shape()[0]]),
            window,
        },
    )
    .unwrap();
    (
        g.value(out.prediction).to_vec(),
        g.shape(out.prediction).to_vec(),
        g.shape(out.backbone_input).to_vec(),
    )
}

#[test]
fn backbone_sequence_length_is_independent_of_variable_count() {
    for v in [1, 3, 48] {
        let cfg = ModelConfig::toy(vocab(v));
        let params = init_params::<f64>(&cfg, 0).unwrap();
        let names = cfg.vocabulary.names().to_vec();
        let x = random_input(&[2, v, 8, 16], v as u64);
        let (_, pred_shape, seq) = run(&cfg, &params, &x, &names, &names, None);
        assert_eq!(seq, vec![2, 32, 16], "V={v}");
        assert_eq!(pred_shape, vec![2, v, 8, 16]);
    }
}

#[test]
fn output_is_invariant_to_input_variable_order() {
    let cfg = ModelConfig::toy(vocab(4));
    let params = init_params::<f64>(&cfg, 2).unwrap();
    let names = cfg.vocabulary.names().to_vec();
    let x = random_input(&[1, 4, 8, 16], 3);
    let perm = [2, 0, 3, 1];
    let cells = 128;
    let mut xp = Vec::new();
    for &p in &perm {
        xp.extend_from_slice(&x.data()[p * cells..(p + 1) * cells]);
    }
    let xp = Tensor::new(vec![1, 4, 8, 16], xp).unwrap();
    let names_p: Vec<String> = perm.iter().map(|&p| names[p].clone()).collect();
    let (a, _, _) = run(&cfg, &params, &x, &names, &names, None);
    let (b, _, _) = run(&cfg, &params, &xp, &names_p, &names, None);
    let worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn any_nonempty_variable_subset_is_accepted() {
    let cfg = ModelConfig::toy(vocab(3));
    let params = init_params::<f64>(&cfg, 2).unwrap();
    let names = cfg.vocabulary.names().to_vec();
    for subset in [vec![1], vec![0, 2], vec![2, 1, 0]] {
        let vars: Vec<String> = subset.iter().map(|&i| names[i].clone()).collect();
        let x = random_input(&[1, vars.len(), 8, 16], 1);
        let (y, shape, _) = run(&cfg, &params, &x, &vars, &names, None);
        assert_eq!(shape, vec![1, 3, 8, 16]);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn eval_forward_is_deterministic() {
    let cfg = ModelConfig::desk(vocab(2));
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let names = cfg.vocabulary.names().to_vec();
    let x = random_input(&[1, 2, 16, 32], 0);
    assert_eq!(run(&cfg, &params, &x, &names, &names, None).0, run(&cfg, &params, &x, &names, &names, None).0);
}

#[test]
fn full_token_window_equals_plain_forward_bit_exactly() {
    let cfg = ModelConfig::toy(vocab(2));
    let params = init_params::<f64>(&cfg, 5).unwrap();
    let names = cfg.vocabulary.names().to_vec();
    let x = random_input(&[1, 2, 8, 16], 2);
    let full = Some(TokenWindow::full(&cfg));
    let a = run(&cfg, &params, &x, &names, &names, None).0;
    let b = run(&cfg, &params, &x, &names, &names, full).0;
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn token_subset_covers_only_retained_patches() {
    let mut cfg = ModelConfig::toy(vocab(1));
    cfg.grid_height = 32;
    cfg.grid_width = 64;
    let params = init_params::<f64>(&cfg, 5).unwrap();
    let names = cfg.vocabulary.names().to_vec();
    let window = TokenWindow {
        row0: 2,
        rows: 4,
        col0: 10,
        cols: 10,
    };
    let x = random_input(&[1, 1, 8, 20], 2);
    let (_, shape, seq) = run(&cfg, &params, &x, &names, &names, Some(window));
    assert_eq!(shape, vec![1, 1, 8, 20]);
    assert_eq!(seq, vec![1, 40, 16]);
    // Wrapping through the east edge is allowed.
    let wrap = TokenWindow { col0: 28, ..window };
    assert_eq!(run(&cfg, &params, &x, &names, &names, Some(wrap)).1, vec![1, 1, 8, 20]);
    let empty = TokenWindow { rows: 0, ..window };
    let mut g = Graph::new(Mode::Eval, 0);
    let req = ForwardRequest {
        input: &x,
        input_vars: &names,
        targets: &names,
        lead: LeadTime::Hours(vec![6.0]),
        window: Some(empty),
    };
    assert!(forward(&mut g, &cfg, &params, &req).is_err());
}

#[test]
fn single_variable_aggregation_is_value_then_output_projection() {
    let cfg = ModelConfig::toy(vocab(1));
    let params = init_params::<f64>(&cfg, 8).unwrap();
    let tokens: Tensor<f64> = normal_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[1, 1, 3, 16], 1.0);
    let mut g = Graph::new(Mode::Eval, 0);
    let t = g.constant(&tokens);
    let agg = aggregate_variables(&mut g, &cfg, &params, t).unwrap();
    let flat = g.reshape(t, &[3, 16]).unwrap();
    let v = nn::linear(&mut g, &params, "agg.attn.v", flat).unwrap();
    let o = nn::linear(&mut g, &params, "agg.attn.o", v).unwrap();
    for (a, b) in g.value(agg).iter().zip(g.value(o)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn lead_time_embedding_is_linear_in_scaled_hours() {
    let cfg = ModelConfig::toy(vocab(1));
    let params = init_params::<f64>(&cfg, 0).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let e = embed_lead_time(&mut g, &params, &LeadTime::Hours(vec![84.0, 84.0, 6.0]), 3).unwrap();
    let v = g.value(e);
    assert_eq!(&v[..16], &v[16..32]);
    let w = params.get("lead_embed.weight").unwrap().data();
    let b = params.get("lead_embed.bias").unwrap().data();
    for k in 0..16 {
        assert!((v[k] - (w[k] * 0.5 + b[k])).abs() < 1e-15);
    }
    assert!(embed_lead_time(&mut g, &params, &LeadTime::Hours(vec![-6.0]), 1).is_err());
}

/// One gradient step on data whose target depends on Δt makes the output
/// depend on Δt (a zero-initialized lead embedding would not).
#[test]
fn one_gradient_step_makes_output_lead_time_sensitive() {
    let cfg = ModelConfig::toy(vocab(1));
    let mut params = init_params::<f64>(&cfg, 1).unwrap();
    for name in ["lead_embed.weight", "lead_embed.bias"] {
        let t = params.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let names = cfg.vocabulary.names().to_vec();
    let x = random_input(&[2, 1, 8, 16], 4);
    let predict = |p: &ParamStore<f64>, lead: f64| {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = forward(
            &mut g,
            &cfg,
            p,
            &ForwardRequest {
                input: &x,
                input_vars: &names,
                targets: &names,
                lead: LeadTime::Hours(vec![lead; 2]),
                window: None,
            },
        )
        .unwrap();
        g.value(out.prediction)[..128].to_vec()
    };
    let diff = |p: &ParamStore<f64>| {
        predict(p, 6.0).iter().zip(predict(p, 168.0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let before = diff(&params);
    // Targets: the input itself at 6 h, its negation at 168 h.
    let mut g = Graph::new(Mode::Train, 0);
    let out = forward(
        &mut g,
        &cfg,
        &params,
        &ForwardRequest {
            input: &x,
            input_vars: &names,
            targets: &names,
            lead: LeadTime::Hours(vec![6.0, 168.0]),
            window: None,
        },
    )
    .unwrap();
    let mut target = x.data()[..128].to_vec();
    target.extend(x.data()[128..].iter().map(|v| -v));
    let target = g.constant_from(vec![2, 1, 8, 16], target.into_iter().map(|v| v as f64).collect()).unwrap();
    let d = g.sub(out.prediction, target).unwrap();
    let sq = g.square(d).unwrap();
    let loss = g.mean_all(sq).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut params);
    for (_, t) in params.iter_mut() {
        if let Some(grad) = t.grad.take() {
            for (x, g) in t.data_mut().iter_mut().zip(grad) {
                *x -= 0.05 * g;
            }
        }
    }
    assert_eq!(before, 0.0);
    assert!(diff(&params) > 0.0);
}

fn projection_model() -> (ModelConfig, ParamStore<f64>) {
    let mut cfg = ModelConfig::toy(vocab(2));
    let mut params = init_params::<f64>(&cfg, 0).unwrap();
    add_projection_head(&mut cfg, &mut params, &["co2".into(), "so2".into()], &["tas".into()], 1).unwrap();
    (cfg, params)
}

#[test]
fn projection_history_is_an_unordered_set() {
    let (cfg, params) = projection_model();
    let hist = random_input(&[1, 10, 2, 8, 16], 5);
    let slice = 2 * 128;
    let mut shuffled = Vec::new();
    for t in [3, 9, 0, 1, 7, 2, 8, 4, 6, 5] {
        shuffled.extend_from_slice(&hist.data()[t * slice..(t + 1) * slice]);
    }
    let shuffled = Tensor::new(hist.shape().to_vec(), shuffled).unwrap();
    let eval = |h: &Tensor<f32>| {
        let mut g = Graph::new(Mode::Eval, 0);
        let y = projection_forward(&mut g, &cfg, &params, h).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 8, 16]);
        g.value(y).to_vec()
    };
    let (a, b) = (eval(&hist), eval(&shuffled));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-5));
}

#[test]
fn single_year_history_attends_with_weight_one() {
    let (cfg, params) = projection_model();
    let one = random_input(&[1, 1, 2, 8, 16], 6);
    // Two identical slices give the same softmax-weighted value as one.
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let two = Tensor::new(vec![1, 2, 2, 8, 16], two).unwrap();
    let eval = |h: &Tensor<f32>| {
        let mut g = Graph::new(Mode::Eval, 0);
        let y = projection_forward(&mut g, &cfg, &params, h).unwrap();
        g.value(y).to_vec()
    };
    let (a, b) = (eval(&one), eval(&two));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10));
    let empty = Tensor::<f32>::zeros(&[1, 0, 2, 8, 16]);
    let mut g = Graph::new(Mode::Eval, 0);
    assert!(projection_forward(&mut g, &cfg, &params, &empty).is_err());
}

#[test]
fn constant_positional_embedding_stays_constant() {
    let t = Tensor::full(&[4 * 8, 3], 0.25f64);
    let r = interpolate_pos_embed(&t, (4, 8), (8, 16)).unwrap();
    assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = ModelConfig::toy(vocab(3));
    let ck = Checkpoint {
        params: init_params::<f32>(&cfg, 9).unwrap(),
        config: cfg,
        meta: serde_json::json!({"seed": 9}),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.gtb");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}
