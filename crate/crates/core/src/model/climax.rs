//! The network: per-variable patch embedding, cross-attention variable
//! aggregation, lead-time and positional embeddings, a pre-norm ViT
//! backbone and a per-token prediction head.
//!
//! Parameter layout (`{v}` is a vocabulary variable, `{i}` a block index):
//!
//! | name                         | shape           |
//! |------------------------------|-----------------|
//! | `var_embed.{v}.weight/bias`  | `[p², D]`, `[D]`|
//! | `var_pos.{v}`                | `[D]`           |
//! | `agg.query`                  | `[D]`           |
//! | `agg.attn.{q,k,v,o}.*`       | `[D, D]`        |
//! | `pos_embed`                  | `[h·w, D]`      |
//! | `lead_embed.weight/bias`     | `[1, D]`, `[D]` |
//! | `blocks.{i}.{norm1,attn,norm2,mlp}.*` |        |
//! | `norm.weight/bias`           | `[D]`           |
//! | `head.{l}.weight/bias`       |                 |
//!
//! Projection adapters add `proj.query`, `proj.attn.*` and `proj.head.*`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::patch::{patchify_var, unpatchify_var};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{ParamStore, Scalar, Tensor};

/// Lead times are divided by one week before the linear embedding.
pub const LEAD_TIME_SCALE_HOURS: f64 = 168.0;
const EMBED_INIT_STD: f64 = 0.02;

/// How the lead-time embedding is driven.
#[derive(Clone, Debug, PartialEq)]
pub enum LeadTime {
    /// One lead time in hours per batch element.
    Hours(Vec<f64>),
    /// Constant embedding input (downscaling): the embedding reduces to its bias.
    Fixed,
}

/// Sub-rectangle of the token grid. Columns may wrap past the east edge
/// when the grid is periodic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenWindow {
    pub row0: usize,
    pub rows: usize,
    pub col0: usize,
    pub cols: usize,
}

impl TokenWindow {
    pub fn full(cfg: &ModelConfig) -> Self {
        let (h, w) = cfg.token_grid();
        TokenWindow {
            row0: 0,
            rows: h,
            col0: 0,
            cols: w,
        }
    }

    pub fn is_full(&self, cfg: &ModelConfig) -> bool {
        *self == TokenWindow::full(cfg)
    }

    /// Flat positional-embedding indices of the retained tokens, row-major.
    pub fn positions(&self, cfg: &ModelConfig) -> Result<Vec<usize>> {
        let (h, w) = cfg.token_grid();
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid("token window is empty"));
        }
        if self.row0 + self.rows > h || self.cols > w || self.col0 >= w {
            return Err(Error::invalid(format!(
                "token window {self:?} exceeds the {h}×{w} token grid"
            )));
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in self.row0..self.row0 + self.rows {
            for c in 0..self.cols {
                out.push(r * w + (self.col0 + c) % w);
            }
        }
        Ok(out)
    }
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRequest<'a> {
    /// `[B, V, H, W]`, already normalized.
    pub input: &'a Tensor<f32>,
    pub input_vars: &'a [String],
    pub targets: &'a [String],
    pub lead: LeadTime,
    pub window: Option<TokenWindow>,
}

/// Handles into the graph produced by [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, V', H, W]`
    pub prediction: Var,
    /// Sequence entering the first transformer block, `[B, L, D]`.
    pub backbone_input: Var,
    /// Aggregated tokens before positional/lead embeddings, `[B, L, D]`.
    pub aggregated: Var,
}

fn pos_embed_sincos(h: usize, w: usize, dim: usize) -> Vec<f64> {
    // Half the channels encode the row, half the column, each as sin/cos pairs.
    let quarter = (dim / 4).max(1);
    let mut out = vec![0.0; h * w * dim];
    for i in 0..h {
        for j in 0..w {
            let row = &mut out[(i * w + j) * dim..(i * w + j + 1) * dim];
            for (c, x) in row.iter_mut().enumerate() {
                let (coord, k) = if c < dim / 2 { (i as f64, c) } else { (j as f64, c - dim / 2) };
                let freq = 1.0 / 10000f64.powf((k % quarter) as f64 / quarter as f64);
                *x = if k < quarter { (coord * freq).sin() } else { (coord * freq).cos() };
            }
        }
    }
    out
}

/// Patch embedding and variable positional embedding for one variable.
pub fn init_variable<T: Scalar>(
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    name: &str,
) {
    let p2 = cfg.patch_size * cfg.patch_size;
    nn::init_linear(params, rng, &format!("var_embed.{name}"), p2, cfg.embed_dim);
    params.insert(
        format!("var_pos.{name}"),
        nn::normal_tensor(rng, &[cfg.embed_dim], EMBED_INIT_STD),
    );
}

fn init_head<T: Scalar>(params: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.embed_dim;
    let mut fan_in = d;
    for l in 0..cfg.head_depth {
        let last = l + 1 == cfg.head_depth;
        let fan_out = if last { cfg.head_out_dim() } else { cfg.head_hidden_dim };
        nn::init_linear(params, rng, &format!("head.{l}"), fan_in, fan_out);
        fan_in = fan_out;
    }
}

/// Fresh parameters for `cfg`, deterministic in `seed` and independent of
/// the element type.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let d = cfg.embed_dim;
    for v in cfg.vocabulary.names() {
        init_variable(&mut params, cfg, &mut rng, v);
    }
    params.insert("agg.query", nn::normal_tensor(&mut rng, &[d], EMBED_INIT_STD));
    nn::init_attention(&mut params, &mut rng, "agg.attn", d);
    let (h, w) = cfg.token_grid();
    let pe = pos_embed_sincos(h, w, d).into_iter().map(T::cst).collect();
    params.insert("pos_embed", Tensor::new(vec![h * w, d], pe)?);
    nn::init_linear(&mut params, &mut rng, "lead_embed", 1, d);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        nn::init_layer_norm(&mut params, &format!("{b}.norm1"), d);
        nn::init_attention(&mut params, &mut rng, &format!("{b}.attn"), d);
        nn::init_layer_norm(&mut params, &format!("{b}.norm2"), d);
        nn::init_mlp(&mut params, &mut rng, &format!("{b}.mlp"), d, d * cfg.mlp_ratio);
    }
    nn::init_layer_norm(&mut params, "norm", d);
    init_head(&mut params, cfg, &mut rng);
    Ok(params)
}

/// True for positional-embedding parameters (exempt from weight decay).
pub fn is_positional(name: &str) -> bool {
    name == "pos_embed" || name.starts_with("var_pos.")
}

/// True for LayerNorm scale/shift parameters.
pub fn is_layer_norm(name: &str) -> bool {
    name.starts_with("norm.")
        || (name.starts_with("blocks.") && (name.contains(".norm1.") || name.contains(".norm2.")))
}

/// Per-variable patch embedding: `[B, V, H, W]` → `[B, V, L, D]`, adding each
/// variable's positional embedding.
pub fn tokenize_and_embed<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    x: Var,
    vars: &[String],
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != vars.len() {
        return Err(Error::invalid(format!(
            "input shape {s:?} does not match {} variables",
            vars.len()
        )));
    }
    if vars.is_empty() {
        return Err(Error::invalid("at least one input variable is required"));
    }
    for v in vars {
        cfg.vocabulary.index_of(v)?;
    }
    cfg.check_grid(s[2], s[3])?;
    let (b, nv) = (s[0], s[1]);
    let p = cfg.patch_size;
    let d = cfg.embed_dim;
    let l = (s[2] / p) * (s[3] / p);

    let patches = patchify_var(g, x, p)?; // [B, V, L, p²]
    let patches = g.permute(patches, &[1, 0, 2, 3])?;
    let patches = g.reshape(patches, &[nv, b * l, p * p])?;

    let mut weights = Vec::with_capacity(nv);
    let mut shifts = Vec::with_capacity(nv);
    for v in vars {
        let w = g.param(params, &format!("var_embed.{v}.weight"))?;
        weights.push(g.reshape(w, &[1, p * p, d])?);
        let bias = g.param(params, &format!("var_embed.{v}.bias"))?;
        let vp = g.param(params, &format!("var_pos.{v}"))?;
        let shift = g.add(bias, vp)?;
        shifts.push(g.reshape(shift, &[1, 1, d])?);
    }
    let w = g.concat(&weights, 0)?; // [V, p², D]
    let shift = g.concat(&shifts, 0)?; // [V, 1, D]
    let tokens = g.matmul(patches, w)?; // [V, B·L, D]
    let shift = g.expand(shift, &[nv, b * l, d])?;
    let tokens = g.add(tokens, shift)?;
    let tokens = g.reshape(tokens, &[nv, b, l, d])?;
    g.permute(tokens, &[1, 0, 2, 3])
}

/// Cross-attention of one learnable query over the variable tokens at each
/// position: `[B, V, L, D]` → `[B, L, D]`.
pub fn aggregate_variables<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    tokens: Var,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 4 || s[3] != cfg.embed_dim || s[1] == 0 {
        return Err(Error::invalid(format!("aggregation expects [B, V, L, D], got {s:?}")));
    }
    let (b, nv, l, d) = (s[0], s[1], s[2], s[3]);
    let ctx = g.permute(tokens, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b * l, nv, d])?;
    let q = g.param(params, "agg.query")?;
    let q = g.reshape(q, &[1, 1, d])?;
    let q = g.expand(q, &[b * l, 1, d])?;
    let out = nn::multi_head_attention(g, params, "agg.attn", q, ctx, cfg.heads)?;
    g.reshape(out, &[b, l, d])
}

/// Lead-time embedding `[B, D]`: a linear map of `Δt / 168 h`.
pub fn embed_lead_time<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    lead: &LeadTime,
    batch: usize,
) -> Result<Var> {
    let inputs: Vec<T> = match lead {
        LeadTime::Hours(h) => {
            if h.len() != batch {
                return Err(Error::invalid(format!(
                    "{} lead times for a batch of {batch}",
                    h.len()
                )));
            }
            if let Some(bad) = h.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::invalid(format!("lead time {bad} h must be positive")));
            }
            h.iter().map(|&x| T::cst(x / LEAD_TIME_SCALE_HOURS)).collect()
        }
        LeadTime::Fixed => vec![T::zero(); batch],
    };
    let x = g.constant_from(vec![batch, 1], inputs)?;
    nn::linear(g, params, "lead_embed", x)
}

/// Transformer blocks followed by the final LayerNorm.
pub fn backbone<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    mut x: Var,
) -> Result<Var> {
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        let dp = cfg.drop_path_at(i);
        let h = nn::layer_norm(g, params, &format!("{b}.norm1"), x)?;
        let a = nn::multi_head_attention(g, params, &format!("{b}.attn"), h, h, cfg.heads)?;
        let a = g.dropout(a, cfg.dropout)?;
        let a = g.drop_path(a, dp)?;
        x = g.add(x, a)?;
        let h = nn::layer_norm(g, params, &format!("{b}.norm2"), x)?;
        let m = nn::mlp(g, params, &format!("{b}.mlp"), h, cfg.dropout)?;
        let m = g.drop_path(m, dp)?;
        x = g.add(x, m)?;
    }
    nn::layer_norm(g, params, "norm", x)
}

/// Per-token MLP head: `[B, L, D]` → `[B, L, |V|·p²]`.
pub fn prediction_head<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    mut x: Var,
) -> Result<Var> {
    for l in 0..cfg.head_depth {
        x = nn::linear(g, params, &format!("head.{l}"), x)?;
        if l + 1 < cfg.head_depth {
            x = g.gelu(x)?;
        }
    }
    Ok(x)
}

/// Tokenize, aggregate and add the spatial positional embedding for the
/// retained `window`; returns `[B, L, D]` and the aggregated tokens.
fn embed_inputs<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    x: Var,
    vars: &[String],
    window: &TokenWindow,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let p = cfg.patch_size;
    if s.len() != 4 || s[2] != window.rows * p || s[3] != window.cols * p {
        return Err(Error::invalid(format!(
            "input {s:?} does not cover a {}×{} token window with patch {p}",
            window.rows, window.cols
        )));
    }
    let tokens = tokenize_and_embed(g, cfg, params, x, vars)?;
    let agg = aggregate_variables(g, cfg, params, tokens)?;
    let pos = g.param(params, "pos_embed")?;
    let pos = if window.is_full(cfg) {
        pos
    } else {
        let idx = window.positions(cfg)?;
        g.gather(pos, 0, &idx)?
    };
    let x = g.add(agg, pos)?;
    Ok((x, agg))
}

/// Full forecasting pass. With `window: None` the input must cover the
/// configured grid; with a window only the retained tokens are processed
/// and the prediction covers just those patches.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    req: &ForwardRequest<'_>,
) -> Result<ForwardOutput> {
    let window = req.window.unwrap_or_else(|| TokenWindow::full(cfg));
    window.positions(cfg)?;
    let target_idx: Vec<usize> = req
        .targets
        .iter()
        .map(|t| cfg.vocabulary.index_of(t))
        .collect::<Result<_>>()?;
    if target_idx.is_empty() {
        return Err(Error::invalid("no target variables requested"));
    }
    let input = if T::DTYPE == "f32" {
        g.constant_from(req.input.shape().to_vec(), req.input.data().iter().map(|&v| T::cst(v as f64)).collect())?
    } else {
        let t: Tensor<T> = req.input.cast();
        g.constant(&t)
    };
    let batch = req.input.shape().first().copied().unwrap_or(0);
    let (x, aggregated) = embed_inputs(g, cfg, params, input, req.input_vars, &window)?;
    let lead = embed_lead_time(g, params, &req.lead, batch)?;
    let lead = g.reshape(lead, &[batch, 1, cfg.embed_dim])?;
    let l = window.rows * window.cols;
    let lead = g.expand(lead, &[batch, l, cfg.embed_dim])?;
    let x = g.add(x, lead)?;
    let backbone_input = g.dropout(x, cfg.dropout)?;
    let feats = backbone(g, cfg, params, backbone_input)?;
    let out = prediction_head(g, cfg, params, feats)?;
    let full = unpatchify_var(
        g,
        out,
        cfg.vocabulary.len(),
        (window.rows, window.cols),
        cfg.patch_size,
    )?;
    let prediction = if target_idx.len() == cfg.vocabulary.len()
        && target_idx.iter().enumerate().all(|(i, &j)| i == j)
    {
        full
    } else {
        g.gather(full, 1, &target_idx)?
    };
    Ok(ForwardOutput {
        prediction,
        backbone_input,
        aggregated,
    })
}

/// Projection pass over a forcing history `[B, T, V, H, W]`: each slice is
/// embedded and encoded with shared weights, mean-pooled over tokens,
/// attended by a learnable query across time and mapped to `[B, V', H, W]`.
pub fn projection_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    history: &Tensor<f32>,
) -> Result<Var> {
    let proj = cfg
        .projection
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no projection head; call add_projection_head"))?;
    let s = history.shape();
    if s.len() != 5 {
        return Err(Error::invalid(format!("history must be [B, T, V, H, W], got {s:?}")));
    }
    let (b, steps, nv, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    if steps == 0 {
        return Err(Error::invalid("history length must be at least one"));
    }
    if nv != proj.inputs.len() {
        return Err(Error::invalid(format!(
            "history has {nv} variables, projection head expects {}",
            proj.inputs.len()
        )));
    }
    if (h, w) != (cfg.grid_height, cfg.grid_width) {
        return Err(Error::invalid(format!(
            "history grid {h}×{w} differs from model grid {}×{}",
            cfg.grid_height, cfg.grid_width
        )));
    }
    let d = cfg.embed_dim;
    let data: Vec<T> = history.data().iter().map(|&v| T::cst(v as f64)).collect();
    let x = g.constant_from(vec![b * steps, nv, h, w], data)?;
    let (x, _) = embed_inputs(g, cfg, params, x, &proj.inputs, &TokenWindow::full(cfg))?;
    let x = g.dropout(x, cfg.dropout)?;
    let feats = backbone(g, cfg, params, x)?; // [B·T, L, D]
    let pooled = g.mean_axis(feats, 1)?; // [B·T, D]
    let pooled = g.reshape(pooled, &[b, steps, d])?;
    let q = g.param(params, "proj.query")?;
    let q = g.reshape(q, &[1, 1, d])?;
    let q = g.expand(q, &[b, 1, d])?;
    let summary = nn::multi_head_attention(g, params, "proj.attn", q, pooled, cfg.heads)?;
    let summary = g.reshape(summary, &[b, d])?;
    let out = nn::linear(g, params, "proj.head", summary)?;
    g.reshape(out, &[b, proj.targets.len(), h, w])
}

/// Adapts a model to new input/output variables for projection: unseen
/// inputs get freshly initialized patch and variable embeddings, and the
/// temporal query, attention and output layer are created from scratch.
/// Returns the variables that were new to the vocabulary.
pub fn add_projection_head<T: Scalar>(
    cfg: &mut ModelConfig,
    params: &mut ParamStore<T>,
    inputs: &[String],
    targets: &[String],
    seed: u64,
) -> Result<Vec<String>> {
    if inputs.is_empty() || targets.is_empty() {
        return Err(Error::invalid("projection needs input and target variables"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6a);
    let added = add_variables(cfg, params, inputs, &mut rng)?;
    let d = cfg.embed_dim;
    params.insert("proj.query", nn::normal_tensor(&mut rng, &[d], EMBED_INIT_STD));
    nn::init_attention(params, &mut rng, "proj.attn", d);
    nn::init_linear(
        params,
        &mut rng,
        "proj.head",
        d,
        targets.len() * cfg.grid_height * cfg.grid_width,
    );
    cfg.projection = Some(super::config::ProjectionHead {
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
    });
    Ok(added)
}

/// Registers variables missing from the vocabulary with fresh embeddings.
/// Returns the names that were added. The head gains output columns for the
/// new variables; existing columns are kept.
pub fn add_variables<T: Scalar>(
    cfg: &mut ModelConfig,
    params: &mut ParamStore<T>,
    names: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let mut added = Vec::new();
    for n in names {
        if !cfg.vocabulary.contains(n) {
            cfg.vocabulary.push(n.clone())?;
            init_variable(params, cfg, rng, n);
            added.push(n.clone());
        }
    }
    if !added.is_empty() {
        widen_head(params, cfg, rng, added.len())?;
    }
    Ok(added)
}

/// Appends freshly initialized output columns for `extra` new variables to
/// the last head layer, keeping the trained columns.
fn widen_head<T: Scalar>(params: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng, extra: usize) -> Result<()> {
    let last = cfg.head_depth - 1;
    let (wn, bn) = (format!("head.{last}.weight"), format!("head.{last}.bias"));
    let w = params.require(&wn)?.clone();
    let b = params.require(&bn)?.clone();
    let (fan_in, old_out) = (w.shape()[0], w.shape()[1]);
    let new_out = cfg.head_out_dim();
    if new_out != old_out + extra * cfg.patch_size * cfg.patch_size {
        return Err(Error::invalid(format!(
            "head width {old_out} does not match the vocabulary before growth"
        )));
    }
    let mut fresh = ParamStore::new();
    nn::init_linear(&mut fresh, rng, "h", fan_in, new_out);
    let fresh_w = fresh.require("h.weight")?;
    let mut data = Vec::with_capacity(fan_in * new_out);
    for r in 0..fan_in {
        data.extend_from_slice(&w.data()[r * old_out..(r + 1) * old_out]);
        data.extend_from_slice(&fresh_w.data()[r * new_out + old_out..(r + 1) * new_out]);
    }
    let mut bias = b.data().to_vec();
    bias.resize(new_out, T::zero());
    params.insert(wn, Tensor::new(vec![fan_in, new_out], data)?);
    params.insert(bn, Tensor::new(vec![new_out], bias)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::grid::VariableVocabulary;

    fn toy() -> (ModelConfig, ParamStore<f64>) {
        let cfg = ModelConfig::toy(VariableVocabulary::new(["a", "b", "c"]).unwrap());
        let params = init_params(&cfg, 1).unwrap();
        (cfg, params)
    }

    fn input(b: usize, v: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::normal_tensor::<f32>(&mut rng, &[b, v, h, w], 1.0)
    }

    #[test]
    fn window_positions_wrap() {
        let (cfg, _) = toy();
        let w = TokenWindow {
            row0: 1,
            rows: 2,
            col0: 6,
            cols: 4,
        };
        assert_eq!(w.positions(&cfg).unwrap(), vec![14, 15, 8, 9, 22, 23, 16, 17]);
        let empty = TokenWindow { rows: 0, ..w };
        assert!(empty.positions(&cfg).is_err());
    }

    #[test]
    fn single_variable_single_patch_token() {
        let mut cfg = ModelConfig::toy(VariableVocabulary::new(["a"]).unwrap());
        cfg.grid_height = 2;
        cfg.grid_width = 2;
        let params = init_params::<f64>(&cfg, 0).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        let t = tokenize_and_embed(&mut g, &cfg, &params, x, &["a".into()]).unwrap();
        assert_eq!(g.shape(t), &[1, 1, 1, 16]);
        // Zero patch → bias + variable embedding.
        let bias = params.get("var_embed.a.bias").unwrap().data();
        let vp = params.get("var_pos.a").unwrap().data();
        for (k, &y) in g.value(t).iter().enumerate() {
            assert!((y - (bias[k] + vp[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_variable_is_rejected() {
        let (cfg, params) = toy();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(&Tensor::zeros(&[1, 1, 8, 16]));
        let err = tokenize_and_embed(&mut g, &cfg, &params, x, &["zz".into()]).unwrap_err();
        assert!(matches!(err, Error::UnknownVariable(_)));
    }

    #[test]
    fn lead_time_must_be_positive() {
        let (_, params) = toy();
        let mut g = Graph::new(Mode::Eval, 0);
        assert!(embed_lead_time(&mut g, &params, &LeadTime::Hours(vec![0.0]), 1).is_err());
        let v = embed_lead_time(&mut g, &params, &LeadTime::Fixed, 1).unwrap();
        assert_eq!(g.value(v), params.get("lead_embed.bias").unwrap().data());
    }

    #[test]
    fn forward_shapes_and_target_slicing() {
        let (cfg, params) = toy();
        let x = input(2, 2, 8, 16, 3);
        let vars: Vec<String> = vec!["c".into(), "a".into()];
        let targets: Vec<String> = vec!["b".into()];
        let mut g = Graph::new(Mode::Eval, 0);
        let out = forward(
            &mut g,
            &cfg,
            &params,
            &ForwardRequest {
                input: &x,
                input_vars: &vars,
                targets: &targets,
                lead: LeadTime::Hours(vec![6.0, 168.0]),
                window: None,
            },
        )
        .unwrap();
        assert_eq!(g.shape(out.prediction), &[2, 1, 8, 16]);
        assert_eq!(g.shape(out.backbone_input), &[2, 32, 16]);
    }

    #[test]
    fn growing_vocabulary_keeps_trained_head_columns() {
        let (mut cfg, mut params) = toy();
        let before = params.get("head.1.weight").unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let added = add_variables(&mut cfg, &mut params, &["a".into(), "q".into()], &mut rng).unwrap();
        assert_eq!(added, vec!["q".to_string()]);
        let after = params.get("head.1.weight").unwrap();
        assert_eq!(after.shape(), &[16, 16]);
        for r in 0..16 {
            assert_eq!(&after.data()[r * 16..r * 16 + 12], &before.data()[r * 12..(r + 1) * 12]);
        }
        assert!(params.contains("var_embed.q.weight") && params.contains("var_pos.q"));
    }

    #[test]
    fn projection_pass_shapes() {
        let (mut cfg, mut params) = toy();
        add_projection_head(&mut cfg, &mut params, &["co2".into()], &["tas".into(), "pr".into()], 4).unwrap();
        let hist = input(2, 3, 8, 16, 5).reshape(vec![2, 3, 1, 8, 16]).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let y = projection_forward(&mut g, &cfg, &params, &hist).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 8, 16]);
    }
}
