//! Bilinear interpolation between lat/lon grids, and index-space bilinear
//! resizing used for positional-embedding transfer.

use super::dataset::Dataset;
use super::spec::GridSpec;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Interpolation stencil along one axis: `value = (1-w)·src[i0] + w·src[i1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Stencil {
    i0: usize,
    i1: usize,
    w: f64,
}

fn lat_stencil(src: &[f64], lat: f64) -> Result<Stencil> {
    let h = src.len();
    if h == 1 {
        return Ok(Stencil { i0: 0, i1: 0, w: 0.0 });
    }
    let increasing = src[1] > src[0];
    let (lo, hi) = if increasing {
        (src[0], src[h - 1])
    } else {
        (src[h - 1], src[0])
    };
    // Beyond the outermost rows the value is clamped, but only for the
    // polar cap no wider than half a row spacing past the edge row.
    let half = 0.5 * (src[1] - src[0]).abs();
    let reach_lo = if lo - half <= -90.0 + 1e-9 { -90.0 } else { lo - half };
    let reach_hi = if hi + half >= 90.0 - 1e-9 { 90.0 } else { hi + half };
    if lat < reach_lo - 1e-9 || lat > reach_hi + 1e-9 {
        return Err(Error::invalid(format!(
            "target latitude {lat} outside source range [{lo}, {hi}]"
        )));
    }
    let lat = lat.clamp(lo, hi);
    // Position in increasing order, then map back to stored order.
    let pos = |k: usize| if increasing { k } else { h - 1 - k };
    let value = |k: usize| src[pos(k)];
    let mut k = 0;
    while k + 2 < h && value(k + 1) <= lat {
        k += 1;
    }
    let (a, b) = (value(k), value(k + 1));
    let w = ((lat - a) / (b - a)).clamp(0.0, 1.0);
    Ok(Stencil {
        i0: pos(k),
        i1: pos(k + 1),
        w,
    })
}

fn lon_stencil(grid: &GridSpec, lon: f64) -> Result<Stencil> {
    let w = grid.width();
    let step = grid.lon_step();
    let offset = (lon - grid.lons()[0]).rem_euclid(360.0);
    let x = offset / step;
    if grid.is_periodic() {
        let i0 = (x.floor() as usize) % w;
        let frac = x - x.floor();
        return Ok(Stencil {
            i0,
            i1: (i0 + 1) % w,
            w: frac,
        });
    }
    let last = (w - 1) as f64;
    if x > last + 1e-9 {
        return Err(Error::invalid(format!(
            "target longitude {lon} outside regional source grid"
        )));
    }
    let x = x.min(last);
    let i0 = (x.floor() as usize).min(w.saturating_sub(2));
    let i1 = (i0 + 1).min(w - 1);
    let frac = if i1 == i0 { 0.0 } else { x - i0 as f64 };
    Ok(Stencil { i0, i1, w: frac })
}

/// Bilinearly interpolates `field` (`V×H×W` on `src`) onto `dst`.
/// Longitude wraps on periodic grids; latitudes beyond the outermost source
/// rows are clamped within the polar cap.
pub fn regrid_bilinear(field: &[f32], src: &GridSpec, dst: &GridSpec) -> Result<Vec<f32>> {
    let cells = src.cells();
    if cells == 0 || field.len() % cells != 0 {
        return Err(Error::invalid(format!(
            "field of {} values is not a whole number of {}×{} grids",
            field.len(),
            src.height(),
            src.width()
        )));
    }
    let vars = field.len() / cells;
    let rows: Vec<Stencil> = dst
        .lats()
        .iter()
        .map(|&l| lat_stencil(src.lats(), l))
        .collect::<Result<_>>()?;
    let cols: Vec<Stencil> = dst
        .lons()
        .iter()
        .map(|&l| lon_stencil(src, l))
        .collect::<Result<_>>()?;
    let sw = src.width();
    let mut out = Vec::with_capacity(vars * dst.cells());
    for v in 0..vars {
        let f = &field[v * cells..(v + 1) * cells];
        for r in &rows {
            for c in &cols {
                let at = |i: usize, j: usize| f[i * sw + j] as f64;
                let top = (1.0 - c.w) * at(r.i0, c.i0) + c.w * at(r.i0, c.i1);
                let bottom = (1.0 - c.w) * at(r.i1, c.i0) + c.w * at(r.i1, c.i1);
                out.push(((1.0 - r.w) * top + r.w * bottom) as f32);
            }
        }
    }
    Ok(out)
}

/// Regrids every frame of `dataset` onto `dst`.
pub fn regrid_dataset(dataset: &Dataset, dst: &GridSpec) -> Result<Dataset> {
    let out_data = regrid_bilinear(dataset.data(), &dataset.grid, dst)?;
    let mut out = dataset.clone();
    out.replace_data(dst.clone(), out_data);
    Ok(out)
}

/// Align-corners bilinear resize of a `[h1·w1, channels]` row-major table to
/// `[h2·w2, channels]`, interpolating each channel independently. Corner
/// entries map onto corner entries.
pub fn resize_bilinear<T: Scalar>(
    src: &[T],
    (h1, w1): (usize, usize),
    (h2, w2): (usize, usize),
    channels: usize,
) -> Result<Vec<T>> {
    if src.len() != h1 * w1 * channels || h1 == 0 || w1 == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::invalid(format!(
            "cannot resize {} values as {h1}×{w1}×{channels} to {h2}×{w2}",
            src.len()
        )));
    }
    let axis = |n1: usize, n2: usize| -> Vec<Stencil> {
        (0..n2)
            .map(|i| {
                if n1 == 1 || n2 == 1 {
                    return Stencil { i0: 0, i1: 0, w: 0.0 };
                }
                let x = i as f64 * (n1 - 1) as f64 / (n2 - 1) as f64;
                let i0 = (x.floor() as usize).min(n1 - 2);
                Stencil {
                    i0,
                    i1: i0 + 1,
                    w: x - i0 as f64,
                }
            })
            .collect()
    };
    let rows = axis(h1, h2);
    let cols = axis(w1, w2);
    let mut out = Vec::with_capacity(h2 * w2 * channels);
    for r in &rows {
        for c in &cols {
            for ch in 0..channels {
                let at = |i: usize, j: usize| src[(i * w1 + j) * channels + ch].f64();
                let top = (1.0 - c.w) * at(r.i0, c.i0) + c.w * at(r.i0, c.i1);
                let bottom = (1.0 - c.w) * at(r.i1, c.i0) + c.w * at(r.i1, c.i1);
                out.push(T::cst((1.0 - r.w) * top + r.w * bottom));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_cell_center() {
        let src = GridSpec::new(vec![-45.0, 45.0], vec![0.0, 180.0]).unwrap();
        let dst = GridSpec::new(vec![0.0], vec![90.0]).unwrap();
        let out = regrid_bilinear(&[0.0, 1.0, 2.0, 3.0], &src, &dst).unwrap();
        assert_eq!(out, vec![1.5]);
    }

    #[test]
    fn constant_field_any_resolution() {
        let src = GridSpec::equiangular(8, 16);
        let field = vec![3.25f32; 2 * 8 * 16];
        for (h, w) in [(4, 8), (16, 32), (5, 7)] {
            let out = regrid_bilinear(&field, &src, &GridSpec::equiangular(h, w)).unwrap();
            assert!(out.iter().all(|&x| (x - 3.25).abs() < 1e-6));
        }
    }

    #[test]
    fn periodic_wrap_between_last_and_first_column() {
        let src = GridSpec::new(vec![0.0], vec![0.0, 90.0, 180.0, 270.0]).unwrap();
        let dst = GridSpec::new(vec![0.0], vec![315.0]).unwrap();
        let out = regrid_bilinear(&[0.0, 1.0, 2.0, 3.0], &src, &dst).unwrap();
        assert_eq!(out, vec![1.5]);
    }

    #[test]
    fn polar_clamp_and_out_of_hull() {
        let src = GridSpec::equiangular(4, 4);
        let dst = GridSpec::new(vec![89.0, -89.0], vec![0.0]).unwrap();
        let field: Vec<f32> = (0..16).map(|x| x as f32).collect();
        let out = regrid_bilinear(&field, &src, &dst).unwrap();
        assert_eq!(out, vec![12.0, 0.0]);

        let regional = GridSpec::new(vec![10.0, 20.0], vec![0.0, 90.0, 180.0, 270.0]).unwrap();
        let far = GridSpec::new(vec![60.0], vec![0.0]).unwrap();
        assert!(regrid_bilinear(&[0.0; 8], &regional, &far).is_err());
    }

    #[test]
    fn resize_identity_and_corners() {
        let src: Vec<f64> = (0..12).map(|x| x as f64 * 0.5).collect();
        assert_eq!(resize_bilinear(&src, (2, 3), (2, 3), 2).unwrap(), src);
        let up = resize_bilinear(&src, (2, 3), (3, 5), 2).unwrap();
        assert_eq!(up[0], src[0]);
        assert_eq!(up[up.len() - 1], src[src.len() - 1]);
    }
}
