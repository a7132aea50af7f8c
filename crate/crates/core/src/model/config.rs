use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VariableVocabulary;

/// Architecture hyperparameters plus the variable vocabulary the
/// tokenizer and head are built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    /// Linear layers in the prediction head (GELU between them).
    pub head_depth: usize,
    pub drop_path: f64,
    pub dropout: f64,
    /// Spatial grid the positional embedding is laid out for.
    pub grid_height: usize,
    pub grid_width: usize,
    pub vocabulary: VariableVocabulary,
    /// Present once the model has been adapted for projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<ProjectionHead>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub inputs: Vec<String>,
    pub targets: Vec<String>,
}

impl ModelConfig {
    /// Desk-scale defaults on a 16×32 grid.
    pub fn desk(vocabulary: VariableVocabulary) -> Self {
        ModelConfig {
            patch_size: 2,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            head_hidden_dim: 64,
            head_depth: 2,
            drop_path: 0.1,
            dropout: 0.1,
            grid_height: 16,
            grid_width: 32,
            vocabulary,
            projection: None,
        }
    }

    /// Full-scale configuration for 5.625° data (32×64 grid, 48 variables);
    /// kept for reference, far beyond desk budgets.
    pub fn paper(vocabulary: VariableVocabulary) -> Self {
        ModelConfig {
            patch_size: 2,
            embed_dim: 1024,
            depth: 8,
            heads: 16,
            mlp_ratio: 4,
            head_hidden_dim: 1024,
            head_depth: 2,
            drop_path: 0.1,
            dropout: 0.1,
            grid_height: 32,
            grid_width: 64,
            vocabulary,
            projection: None,
        }
    }

    /// Smallest useful configuration: 8×16 grid, D=16, one block.
    pub fn toy(vocabulary: VariableVocabulary) -> Self {
        ModelConfig {
            patch_size: 2,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            head_hidden_dim: 16,
            head_depth: 2,
            drop_path: 0.0,
            dropout: 0.0,
            grid_height: 8,
            grid_width: 16,
            vocabulary,
            projection: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.embed_dim == 0 || self.heads == 0 || self.head_depth == 0 {
            return Err(Error::invalid("patch size, embed dim, heads and head depth must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        self.check_grid(self.grid_height, self.grid_width)?;
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::invalid("dropout and drop_path must lie in [0, 1)"));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        Ok(())
    }

    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        let p = self.patch_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "grid {h}×{w} is not divisible by patch size {p}"
            )));
        }
        Ok(())
    }

    /// Token grid `(h, w)` of the positional embedding.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.grid_height / self.patch_size, self.grid_width / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    /// Head output width per token: every vocabulary variable's patch.
    pub fn head_out_dim(&self) -> usize {
        self.vocabulary.len() * self.patch_size * self.patch_size
    }

    /// Stochastic-depth rate of block `i`, rising linearly to `drop_path`.
    pub fn drop_path_at(&self, block: usize) -> f64 {
        if self.depth <= 1 {
            self.drop_path
        } else {
            self.drop_path * block as f64 / (self.depth - 1) as f64
        }
    }
}
