//! Conversion between `[.., C, H, W]` fields and `[.., C, h·w, p²]` patch tokens.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{permute_data, Scalar};

fn check(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "grid {h}×{w} is not divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// `[C, H, W]` → `[C, h·w, p·p]`, patches in row-major token order.
pub fn patchify<T: Copy + Default>(x: &[T], channels: usize, h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    check(h, w, p)?;
    if x.len() != channels * h * w {
        return Err(Error::invalid("patchify: length does not match C×H×W"));
    }
    Ok(permute_data(x, &[channels, h / p, p, w / p, p], &[0, 1, 3, 2, 4]))
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Copy + Default>(tokens: &[T], channels: usize, h: usize, w: usize, p: usize) -> Result<Vec<T>> {
    check(h, w, p)?;
    if tokens.len() != channels * h * w {
        return Err(Error::invalid("unpatchify: length does not match C×H×W"));
    }
    Ok(permute_data(tokens, &[channels, h / p, w / p, p, p], &[0, 1, 3, 2, 4]))
}

/// Differentiable `[B, C, H, W]` → `[B, C, h·w, p²]`.
pub fn patchify_var<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(format!("patchify expects [B, C, H, W], got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    check(h, w, p)?;
    let x = g.reshape(x, &[b, c, h / p, p, w / p, p])?;
    let x = g.permute(x, &[0, 1, 2, 4, 3, 5])?;
    g.reshape(x, &[b, c, (h / p) * (w / p), p * p])
}

/// Differentiable `[B, h·w, C·p²]` head output → `[B, C, H, W]`.
pub fn unpatchify_var<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    channels: usize,
    (th, tw): (usize, usize),
    p: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != th * tw || s[2] != channels * p * p {
        return Err(Error::invalid(format!(
            "unpatchify expects [B, {}, {}], got {s:?}",
            th * tw,
            channels * p * p
        )));
    }
    let b = s[0];
    let x = g.reshape(x, &[b, th, tw, channels, p, p])?;
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
    g.reshape(x, &[b, channels, th * p, tw * p])
}
