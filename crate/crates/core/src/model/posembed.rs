//! Moving a trained model to a different spatial resolution.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::grid::resize_bilinear;
use crate::tensor::{ParamStore, Scalar, Tensor};

/// Bilinearly resizes a `[h1·w1, D]` positional embedding to `[h2·w2, D]`.
/// Equal sizes return the table unchanged.
pub fn interpolate_pos_embed<T: Scalar>(
    table: &Tensor<T>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 || s[0] != from.0 * from.1 {
        return Err(Error::invalid(format!(
            "positional embedding {s:?} does not match a {}×{} token grid",
            from.0, from.1
        )));
    }
    let d = s[1];
    if from == to {
        return Ok(table.clone());
    }
    let data = resize_bilinear(table.data(), from, to, d)?;
    Tensor::new(vec![to.0 * to.1, d], data)
}

/// Re-targets `cfg` and `params` to a `height × width` grid; only the
/// positional embedding depends on the grid size.
pub fn retarget_grid<T: Scalar>(
    cfg: &mut ModelConfig,
    params: &mut ParamStore<T>,
    height: usize,
    width: usize,
) -> Result<()> {
    cfg.check_grid(height, width)?;
    let from = cfg.token_grid();
    let to = (height / cfg.patch_size, width / cfg.patch_size);
    let old = params.require("pos_embed")?;
    let mut new = interpolate_pos_embed(old, from, to)?;
    new.requires_grad = old.requires_grad;
    params.insert("pos_embed", new);
    cfg.grid_height = height;
    cfg.grid_width = width;
    Ok(())
}
