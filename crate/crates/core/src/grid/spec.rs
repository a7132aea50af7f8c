use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LON_TOL: f64 = 1e-9;

/// Latitude/longitude geometry of a regular grid. Latitudes are strictly
/// monotone; longitudes are equispaced modulo 360 and stored in `[0, 360)`.
/// A grid whose longitudes span the full circle is periodic in longitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridSpec {
    lats: Vec<f64>,
    lons: Vec<f64>,
    lon_step: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    lats: Vec<f64>,
    lons: Vec<f64>,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        GridSpec::new(raw.lats, raw.lons)
    }
}

impl From<GridSpec> for RawGrid {
    fn from(g: GridSpec) -> Self {
        RawGrid {
            lats: g.lats,
            lons: g.lons,
        }
    }
}

impl GridSpec {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>) -> Result<Self> {
        if lats.is_empty() || lons.is_empty() {
            return Err(Error::invalid("grid needs at least one latitude and longitude"));
        }
        if lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::invalid("latitudes must lie in [-90, 90]"));
        }
        if lats.len() > 1 {
            let increasing = lats[1] > lats[0];
            let monotone = lats
                .windows(2)
                .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
            if !monotone {
                return Err(Error::invalid("latitudes must be strictly monotone"));
            }
        }
        if lons.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("longitudes must be finite"));
        }
        let lons: Vec<f64> = lons.iter().map(|l| l.rem_euclid(360.0)).collect();
        let lon_step = if lons.len() == 1 {
            360.0
        } else {
            (lons[1] - lons[0]).rem_euclid(360.0)
        };
        if lons.len() > 1 {
            if lon_step <= 0.0 {
                return Err(Error::invalid("longitudes must be distinct"));
            }
            for w in lons.windows(2) {
                let step = (w[1] - w[0]).rem_euclid(360.0);
                if (step - lon_step).abs() > LON_TOL {
                    return Err(Error::invalid("longitude spacing must be uniform"));
                }
            }
            if lon_step * lons.len() as f64 > 360.0 + LON_TOL {
                return Err(Error::invalid("longitudes wrap past a full circle"));
            }
        }
        Ok(GridSpec {
            lats,
            lons,
            lon_step,
        })
    }

    /// Cell-centred equiangular global grid: `h` rows from south to north and
    /// `w` columns starting at 0°E (WeatherBench layout).
    pub fn equiangular(h: usize, w: usize) -> Self {
        let dlat = 180.0 / h as f64;
        let dlon = 360.0 / w as f64;
        let lats = (0..h).map(|i| -90.0 + (i as f64 + 0.5) * dlat).collect();
        let lons = (0..w).map(|j| j as f64 * dlon).collect();
        GridSpec::new(lats, lons).expect("equiangular grid is valid")
    }

    pub fn height(&self) -> usize {
        self.lats.len()
    }

    pub fn width(&self) -> usize {
        self.lons.len()
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn lon_step(&self) -> f64 {
        self.lon_step
    }

    /// True when the columns cover the whole circle.
    pub fn is_periodic(&self) -> bool {
        (self.lon_step * self.width() as f64 - 360.0).abs() < 1e-6
    }

    pub(crate) fn subgrid(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        GridSpec::new(
            rows.iter().map(|&i| self.lats[i]).collect(),
            cols.iter().map(|&j| self.lons[j]).collect(),
        )
    }
}

/// Ordered set of variable names known to a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct VariableVocabulary {
    names: Vec<String>,
}

impl TryFrom<Vec<String>> for VariableVocabulary {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        VariableVocabulary::new(v)
    }
}

impl From<VariableVocabulary> for Vec<String> {
    fn from(v: VariableVocabulary) -> Self {
        v.names
    }
}

pub(crate) fn validate_variable_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['.', ',', '=']) || name.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "variable name `{name}` must be non-empty without dots, commas, '=' or whitespace"
        )));
    }
    Ok(())
}

impl VariableVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut out = VariableVocabulary::default();
        for n in names {
            out.push(n)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, name: impl Into<String>) -> Result<usize> {
        let name = name.into();
        validate_variable_name(&name)?;
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate variable `{name}`")));
        }
        self.names.push(name);
        Ok(self.names.len() - 1)
    }

    /// Appends every name not already present.
    pub fn extend_with<'a>(&mut self, names: impl IntoIterator<Item = &'a String>) -> Result<()> {
        for n in names {
            if !self.contains(n) {
                self.push(n.clone())?;
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}
