//! Shared fixtures for the criterion benchmarks under `benches/`.

use gridformer_core::autograd::{Graph, Mode};
use gridformer_core::grid::{GridSpec, VariableVocabulary};
use gridformer_core::metrics::{lat_mse_loss, lat_weights};
use gridformer_core::model::{forward, init_params, ForwardRequest, LeadTime, ModelConfig};
use gridformer_core::nn::normal_tensor;
use gridformer_core::{ParamStore, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A model with random weights and one random minibatch.
pub struct Fixture {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub vars: Vec<String>,
    pub weights: Vec<f64>,
}

impl Fixture {
    pub fn new(cfg: ModelConfig, batch: usize) -> Fixture {
        let params = init_params(&cfg, 0).expect("valid config");
        let vars: Vec<String> = cfg.vocabulary.names().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [batch, vars.len(), cfg.grid_height, cfg.grid_width];
        let input = normal_tensor(&mut rng, &shape, 1.0);
        let target = normal_tensor(&mut rng, &shape, 1.0);
        let weights = lat_weights(&GridSpec::equiangular(cfg.grid_height, cfg.grid_width)).expect("grid");
        Fixture {
            cfg,
            params,
            input,
            target,
            vars,
            weights,
        }
    }

    /// Desk preset with `nvars` variables on its default 16×32 grid.
    pub fn desk(nvars: usize, batch: usize) -> Fixture {
        let names: Vec<String> = (0..nvars).map(|i| format!("v{i}")).collect();
        Fixture::new(ModelConfig::desk(VariableVocabulary::new(names).expect("names")), batch)
    }

    /// Latitude-weighted loss of one pass; runs backward when `train` is set.
    pub fn step(&self, train: bool) -> Result<f32> {
        let mode = if train { Mode::Train } else { Mode::Eval };
        let mut g = Graph::<f32>::new(mode, 0);
        let lead = vec![72.0; self.input.shape()[0]];
        let out = forward(
            &mut g,
            &self.cfg,
            &self.params,
            &ForwardRequest {
                input: &self.input,
                input_vars: &self.vars,
                targets: &self.vars,
                lead: LeadTime::Hours(lead),
                window: None,
            },
        )?;
        let t = g.constant(&self.target);
        let loss = lat_mse_loss(&mut g, out.prediction, t, &self.weights)?;
        if train {
            g.backward(loss)?;
        }
        Ok(g.value(loss)[0])
    }
}
