use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, GriddedSample};
use super::spec::GridSpec;
use crate::error::{Error, Result};

/// Closed lat/lon box. When `lon_min > lon_max` the box wraps through 0°E.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Region {
    pub const GLOBE: Region = Region {
        lat_min: -90.0,
        lat_max: 90.0,
        lon_min: 0.0,
        lon_max: 360.0,
    };

    fn contains_lon(&self, lon: f64) -> bool {
        const EPS: f64 = 1e-9;
        if self.lon_max - self.lon_min >= 360.0 - EPS {
            return true;
        }
        let lo = self.lon_min.rem_euclid(360.0);
        let hi = self.lon_max.rem_euclid(360.0);
        if lo <= hi {
            lon >= lo - EPS && lon <= hi + EPS
        } else {
            lon >= lo - EPS || lon <= hi + EPS
        }
    }
}

/// Grid rows and columns retained by a crop, in output order. Columns run
/// eastward from the box's western edge, so wrapped boxes stay contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropIndices {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

pub fn crop_indices(grid: &GridSpec, region: &Region) -> Result<CropIndices> {
    if region.lat_min > region.lat_max {
        return Err(Error::invalid("lat_min exceeds lat_max"));
    }
    let rows: Vec<usize> = grid
        .lats()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= region.lat_min - 1e-9 && l <= region.lat_max + 1e-9)
        .map(|(i, _)| i)
        .collect();
    let mut cols: Vec<usize> = grid
        .lons()
        .iter()
        .enumerate()
        .filter(|(_, &l)| region.contains_lon(l))
        .map(|(j, _)| j)
        .collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::invalid(format!(
            "region {region:?} does not intersect the grid"
        )));
    }
    // Full periodic rings keep native order; partial rings start at the
    // western edge of the box.
    if cols.len() < grid.width() {
        let west = region.lon_min.rem_euclid(360.0);
        cols.sort_by(|&a, &b| {
            let da = (grid.lons()[a] - west + 1e-9).rem_euclid(360.0);
            let db = (grid.lons()[b] - west + 1e-9).rem_euclid(360.0);
            da.total_cmp(&db)
        });
    }
    Ok(CropIndices { rows, cols })
}

fn gather(values: &[f32], width: usize, cells: usize, idx: &CropIndices) -> Vec<f32> {
    let frames = values.len() / cells;
    let mut out = Vec::with_capacity(frames * idx.rows.len() * idx.cols.len());
    for f in 0..frames {
        let field = &values[f * cells..(f + 1) * cells];
        for &i in &idx.rows {
            out.extend(idx.cols.iter().map(|&j| field[i * width + j]));
        }
    }
    out
}

/// Retains the grid cells inside the closed `region`.
pub fn crop_region(sample: &GriddedSample, region: &Region) -> Result<GriddedSample> {
    let idx = crop_indices(&sample.grid, region)?;
    let grid = sample.grid.subgrid(&idx.rows, &idx.cols)?;
    let values = gather(&sample.values, sample.grid.width(), sample.grid.cells(), &idx);
    GriddedSample::new(sample.time, grid, sample.variables.clone(), values)
}

pub fn crop_dataset(dataset: &Dataset, region: &Region) -> Result<Dataset> {
    let idx = crop_indices(&dataset.grid, region)?;
    crop_dataset_indices(dataset, &idx)
}

pub fn crop_dataset_indices(dataset: &Dataset, idx: &CropIndices) -> Result<Dataset> {
    let grid = dataset.grid.subgrid(&idx.rows, &idx.cols)?;
    let values = gather(dataset.data(), dataset.grid.width(), dataset.grid.cells(), idx);
    let mut out = dataset.clone();
    out.replace_data(grid, values);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> GriddedSample {
        let grid = GridSpec::equiangular(h, w);
        let values = (0..h * w).map(|x| x as f32).collect();
        GriddedSample::new(0, grid, vec!["x".into()], values).unwrap()
    }

    #[test]
    fn globe_is_identity() {
        let s = sample(8, 16);
        assert_eq!(crop_region(&s, &Region::GLOBE).unwrap(), s);
    }

    #[test]
    fn wrapping_box_index_sets() {
        let s = sample(32, 64);
        let (lats, lons) = (s.grid.lats(), s.grid.lons());
        let region = Region {
            lat_min: lats[4],
            lat_max: lats[11],
            lon_min: lons[50],
            lon_max: lons[9],
        };
        let idx = crop_indices(&s.grid, &region).unwrap();
        let expect_cols: Vec<usize> = (50..64).chain(0..10).collect();
        assert_eq!(idx.rows, (4..12).collect::<Vec<_>>());
        assert_eq!(idx.cols, expect_cols);
        let c = crop_region(&s, &region).unwrap();
        assert_eq!((c.grid.height(), c.grid.width()), (8, 24));
        assert_eq!(c.values[0], (4 * 64 + 50) as f32);
        assert_eq!(crop_region(&c, &region).unwrap(), c);
    }

    #[test]
    fn empty_intersection() {
        let s = sample(4, 8);
        let region = Region {
            lat_min: 10.0,
            lat_max: 12.0,
            lon_min: 0.0,
            lon_max: 360.0,
        };
        assert!(crop_region(&s, &region).is_err());
    }
}
