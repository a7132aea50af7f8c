//! Layers assembled from autodiff primitives: affine maps, LayerNorm,
//! multi-head attention and the transformer MLP.
//!
//! Layers are stateless functions over a [`ParamStore`]; parameters are
//! addressed by dot-separated prefixes (`blocks.0.attn.q.weight`, ...).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| T::cst(rng.random_range(-bound..bound)))
        .collect();
    store.insert(
        join(prefix, "weight"),
        Tensor::new(vec![fan_in, fan_out], w).expect("linear shape"),
    );
    store.insert(join(prefix, "bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(join(prefix, "weight"), Tensor::full(&[dim], T::one()));
    store.insert(join(prefix, "bias"), Tensor::zeros(&[dim]));
}

/// Normal(0, std) tensor, used for embeddings and learnable queries.
pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::cst(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, rng, &join(prefix, p), dim, dim);
    }
    // A key bias only shifts every score of a query equally; softmax ignores it.
    store.remove(&join(prefix, "k.bias"));
}

pub fn init_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
) {
    init_linear(store, rng, &join(prefix, "fc1"), dim, hidden);
    init_linear(store, rng, &join(prefix, "fc2"), hidden, dim);
}

pub fn linear<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(store, &join(prefix, "weight"))?;
    let b = g.param(store, &join(prefix, "bias"))?;
    g.linear(x, w, Some(b))
}

/// LayerNorm over the last axis followed by the learnable scale and shift.
pub fn layer_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(store, &join(prefix, "weight"))?;
    let b = g.param(store, &join(prefix, "bias"))?;
    let n = g.layer_norm(x)?;
    let s = g.mul(n, w)?;
    g.add(s, b)
}

/// Scaled dot-product attention over already-projected `q: [N, Sq, D]`,
/// `k, v: [N, Sk, D]`, split into `heads` heads of width `D / heads`.
/// Returns `[N, Sq, D]` with heads concatenated.
pub fn scaled_dot_product_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || g.shape(v) != sk {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let (n, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!(
            "embedding dim {d} is not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;
    let q = g.reshape(q, &[n, lq, heads, hd])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.reshape(k, &[n, lk, heads, hd])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.reshape(v, &[n, lk, heads, hd])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::cst(1.0 / (hd as f64).sqrt()))?;
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[n, lq, d])
}

/// Multi-head attention with input and output projections stored under
/// `prefix.{q,k,v,o}` (the key projection has no bias). `query` is `[N, Sq, D]` and `context` is `[N, Sk, D]`;
/// self-attention passes the same handle twice.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    query: Var,
    context: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, store, &join(prefix, "q"), query)?;
    let kw = g.param(store, &join(prefix, "k.weight"))?;
    let k = g.linear(context, kw, None)?;
    let v = linear(g, store, &join(prefix, "v"), context)?;
    let a = scaled_dot_product_attention(g, q, k, v, heads)?;
    linear(g, store, &join(prefix, "o"), a)
}

pub fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let h = linear(g, store, &join(prefix, "fc1"), x)?;
    let h = g.gelu(h)?;
    let h = g.dropout(h, dropout)?;
    let y = linear(g, store, &join(prefix, "fc2"), h)?;
    g.dropout(y, dropout)
}
