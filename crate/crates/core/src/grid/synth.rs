//! Synthetic climate-like data: superposed traveling waves with lagged
//! cross-variable coupling and Gaussian noise.
//!
//! A [`Family`] plays the role of one climate model. Its seed fixes the wave
//! numbers, phases, speeds, coupling matrix and static fields, so two datasets
//! drawn from the same family share dynamics. The dataset seed only drives
//! the noise. Everything is a pure function of `(family, seed)`.
//!
//! For a dynamic variable `v` at time `t` (hours, lat/lon in radians):
//!
//! ```text
//! x_v(t) = level_v + Σ_k A_vk·sin(a_vk·lat + b_vk·lon − ω_vk·t + φ_vk)
//!        + Σ_u c_vu·x_u(t − Δ) + σ·ε
//! ```
//!
//! where `Δ` is the series step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, TimeAxis};
use super::regrid::regrid_dataset;
use super::spec::GridSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Family {
    /// Identifies the "climate model"; fixes all structural draws.
    pub seed: u64,
    /// Waves per variable (K).
    pub waves: usize,
    pub amplitude: f64,
    /// Meridional wave numbers are drawn from `[-max, max]`.
    pub max_lat_wavenumber: f64,
    /// Zonal wave numbers are integers in `1..=max`.
    pub max_lon_wavenumber: u32,
    /// Angular speeds (rad/h) drawn from `[min_speed, max_speed]` with random sign.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Row sums of |c_vu| are at most this (keep below 1 for stability).
    pub coupling: f64,
    /// Gaussian noise standard deviation (σ).
    pub noise: f64,
    /// Per-variable offsets are drawn from `[-level, level]`.
    pub level: f64,
}

impl Default for Family {
    fn default() -> Self {
        Family {
            seed: 0,
            waves: 2,
            amplitude: 1.0,
            max_lat_wavenumber: 2.0,
            max_lon_wavenumber: 3,
            min_speed: 0.005,
            max_speed: 0.03,
            coupling: 0.0,
            noise: 0.0,
            level: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub variables: Vec<String>,
    /// Subset of `variables` generated as fixed smooth fields.
    #[serde(default)]
    pub static_variables: Vec<String>,
    #[serde(default = "default_step")]
    pub step_hours: i64,
    /// Number of time steps to emit.
    pub steps: usize,
    #[serde(default)]
    pub start_hour: i64,
    #[serde(default)]
    pub family: Family,
}

fn default_step() -> i64 {
    6
}

#[derive(Clone, Debug)]
struct Wave {
    amp: f64,
    lat_k: f64,
    lon_k: f64,
    omega: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct FamilyDraw {
    waves: Vec<Vec<Wave>>,
    levels: Vec<f64>,
    coupling: Vec<Vec<f64>>,
    statics: Vec<Vec<f64>>,
}

fn draw_family(spec: &SynthSpec, dynamic: &[usize], grid: &GridSpec) -> FamilyDraw {
    let fam = &spec.family;
    let mut rng = ChaCha8Rng::seed_from_u64(fam.seed ^ 0x5eed_fa11_c0de_0001);
    let nd = dynamic.len();
    let mut waves = Vec::with_capacity(nd);
    let mut levels = Vec::with_capacity(nd);
    for _ in 0..nd {
        let mut ws = Vec::with_capacity(fam.waves);
        for _ in 0..fam.waves {
            let speed = if fam.max_speed > fam.min_speed {
                rng.random_range(fam.min_speed..=fam.max_speed)
            } else {
                fam.min_speed
            };
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            ws.push(Wave {
                amp: fam.amplitude * rng.random_range(0.5..=1.0),
                lat_k: if fam.max_lat_wavenumber > 0.0 {
                    rng.random_range(-fam.max_lat_wavenumber..=fam.max_lat_wavenumber)
                } else {
                    0.0
                },
                lon_k: rng.random_range(1..=fam.max_lon_wavenumber.max(1)) as f64,
                omega: sign * speed,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            });
        }
        waves.push(ws);
        levels.push(if fam.level > 0.0 {
            rng.random_range(-fam.level..=fam.level)
        } else {
            0.0
        });
    }
    let mut coupling = vec![vec![0.0; nd]; nd];
    if fam.coupling != 0.0 && nd > 0 {
        for row in coupling.iter_mut() {
            let raw: Vec<f64> = (0..nd).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let norm: f64 = raw.iter().map(|x: &f64| x.abs()).sum::<f64>().max(1e-12);
            for (c, r) in row.iter_mut().zip(raw) {
                *c = fam.coupling * r / norm;
            }
        }
    }
    let n_static = spec.variables.len() - nd;
    let statics = (0..n_static)
        .map(|_| smooth_field(&mut rng, grid))
        .collect();
    FamilyDraw {
        waves,
        levels,
        coupling,
        statics,
    }
}

/// Sum of three low-order sinusoids, unit-ish amplitude.
fn smooth_field(rng: &mut ChaCha8Rng, grid: &GridSpec) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..=1.0),
                rng.random_range(-2.0..=2.0),
                rng.random_range(1..=3) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(grid.cells());
    for &lat in grid.lats() {
        for &lon in grid.lons() {
            let (la, lo) = (lat.to_radians(), lon.to_radians());
            out.push(terms.iter().map(|&(a, p, q, ph)| a * (p * la + q * lo + ph).sin()).sum());
        }
    }
    out
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::invalid("synthetic grid must be non-empty"));
    }
    if spec.variables.is_empty() {
        return Err(Error::invalid("synthetic spec needs at least one variable"));
    }
    if spec.step_hours <= 0 {
        return Err(Error::invalid("time step must be positive"));
    }
    if spec.family.noise < 0.0 || spec.family.amplitude < 0.0 {
        return Err(Error::invalid("noise and amplitude must be non-negative"));
    }
    if spec.family.min_speed > spec.family.max_speed {
        return Err(Error::invalid("min_speed exceeds max_speed"));
    }
    for s in &spec.static_variables {
        if !spec.variables.contains(s) {
            return Err(Error::UnknownVariable(s.clone()));
        }
    }
    Ok(())
}

/// Generates the dataset described by `spec`; noise is drawn from `seed`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    validate(spec)?;
    let grid = GridSpec::equiangular(spec.height, spec.width);
    let dynamic: Vec<usize> = (0..spec.variables.len())
        .filter(|&i| !spec.static_variables.contains(&spec.variables[i]))
        .collect();
    let draw = draw_family(spec, &dynamic, &grid);
    let cells = grid.cells();
    let nv = spec.variables.len();
    let coords: Vec<(f64, f64)> = grid
        .lats()
        .iter()
        .flat_map(|&la| grid.lons().iter().map(move |&lo| (la.to_radians(), lo.to_radians())))
        .collect();
    let wave_field = |d: usize, t: f64| -> Vec<f64> {
        coords
            .iter()
            .map(|&(la, lo)| {
                draw.levels[d]
                    + draw.waves[d]
                        .iter()
                        .map(|w| w.amp * (w.lat_k * la + w.lon_k * lo - w.omega * t + w.phase).sin())
                        .sum::<f64>()
            })
            .collect()
    };

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let has_coupling = draw.coupling.iter().flatten().any(|&c| c != 0.0);
    let burn_in = if has_coupling { 32 } else { 0 };
    let step = spec.step_hours as f64;
    let mut prev: Vec<Vec<f64>> = (0..dynamic.len())
        .map(|d| wave_field(d, (spec.start_hour as f64) - step * (burn_in + 1) as f64))
        .collect();
    let mut data = Vec::with_capacity(spec.steps * nv * cells);
    for s in 0..burn_in + spec.steps {
        let t = spec.start_hour as f64 + step * (s as f64 - burn_in as f64);
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(dynamic.len());
        for d in 0..dynamic.len() {
            let mut f = wave_field(d, t);
            if has_coupling {
                for (u, c) in draw.coupling[d].iter().enumerate() {
                    for (x, p) in f.iter_mut().zip(&prev[u]) {
                        *x += c * p;
                    }
                }
            }
            if spec.family.noise > 0.0 {
                for x in f.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    *x += spec.family.noise * e;
                }
            }
            next.push(f);
        }
        if s >= burn_in {
            let mut dyn_i = 0;
            let mut stat_i = 0;
            for name in &spec.variables {
                if spec.static_variables.contains(name) {
                    data.extend(draw.statics[stat_i].iter().map(|&x| x as f32));
                    stat_i += 1;
                } else {
                    data.extend(next[dyn_i].iter().map(|&x| x as f32));
                    dyn_i += 1;
                }
            }
        }
        prev = next;
    }
    let time = TimeAxis {
        start_hour: spec.start_hour,
        step_hours: spec.step_hours,
        count: spec.steps,
    };
    let mut ds = Dataset::new(grid, spec.variables.clone(), time, data)?
        .with_static(spec.static_variables.clone())?;
    ds.generator = Some(serde_json::json!({ "spec": spec, "seed": seed }));
    Ok(ds)
}

/// Forcing/response series shaped like a climate-projection benchmark:
/// yearly forcing maps and target maps that respond to the recent forcing
/// history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub height: usize,
    pub width: usize,
    pub forcings: Vec<String>,
    pub targets: Vec<String>,
    pub years: usize,
    /// Forcing years averaged into each response.
    #[serde(default = "default_history")]
    pub response_window: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub family_seed: u64,
}

fn default_history() -> usize {
    10
}

#[derive(Clone, Debug)]
pub struct ProjectionData {
    pub forcing: Dataset,
    pub response: Dataset,
}

pub const HOURS_PER_YEAR: i64 = 8760;

/// Forcing `F_v(y) = g_v(y)·P_v(lat, lon)` with smooth scenario curves `g_v`;
/// response `R_u(y) = Σ_v Q_uv(lat, lon)·mean(g_v over the trailing window) + noise`.
pub fn generate_projection(spec: &ProjectionSpec, seed: u64) -> Result<ProjectionData> {
    if spec.forcings.is_empty() || spec.targets.is_empty() || spec.years == 0 {
        return Err(Error::invalid("projection spec needs forcings, targets and years"));
    }
    if spec.response_window == 0 {
        return Err(Error::invalid("response window must be positive"));
    }
    let grid = GridSpec::equiangular(spec.height, spec.width);
    let cells = grid.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.family_seed ^ 0x0c11_4a7e);
    let patterns: Vec<Vec<f64>> = spec
        .forcings
        .iter()
        .map(|_| smooth_field(&mut rng, &grid).iter().map(|x| 1.0 + 0.5 * x).collect())
        .collect();
    let responses: Vec<Vec<Vec<f64>>> = spec
        .targets
        .iter()
        .map(|_| spec.forcings.iter().map(|_| smooth_field(&mut rng, &grid)).collect())
        .collect();
    let curves: Vec<(f64, f64, f64, f64)> = spec
        .forcings
        .iter()
        .map(|_| {
            (
                rng.random_range(0.5..=1.5),
                rng.random_range(0.2..=0.8),
                rng.random_range(5.0..=20.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenario_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
    let jitter: Vec<Vec<f64>> = spec
        .forcings
        .iter()
        .map(|_| (0..spec.years).map(|_| scenario_rng.random_range(-0.3..=0.3)).collect())
        .collect();
    let g = |v: usize, y: usize| -> f64 {
        let (trend, amp, period, phase) = curves[v];
        let x = y as f64 / spec.years as f64;
        trend * x + amp * (std::f64::consts::TAU * y as f64 / period + phase).sin() + jitter[v][y]
    };
    let mut forcing = Vec::with_capacity(spec.years * spec.forcings.len() * cells);
    let mut response = Vec::with_capacity(spec.years * spec.targets.len() * cells);
    for y in 0..spec.years {
        for (v, p) in patterns.iter().enumerate() {
            let gv = g(v, y);
            forcing.extend(p.iter().map(|&x| (gv * x) as f32));
        }
        let lo = (y + 1).saturating_sub(spec.response_window);
        let means: Vec<f64> = (0..spec.forcings.len())
            .map(|v| (lo..=y).map(|k| g(v, k)).sum::<f64>() / (y + 1 - lo) as f64)
            .collect();
        for q in &responses {
            for c in 0..cells {
                let mut r = 0.0;
                for (v, m) in means.iter().enumerate() {
                    r += (1.0 + q[v][c]) * m;
                }
                if spec.noise > 0.0 {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    r += spec.noise * e;
                }
                response.push(r as f32);
            }
        }
    }
    let time = TimeAxis {
        start_hour: 0,
        step_hours: HOURS_PER_YEAR,
        count: spec.years,
    };
    let mut forcing = Dataset::new(grid.clone(), spec.forcings.clone(), time, forcing)?;
    let mut response = Dataset::new(grid, spec.targets.clone(), time, response)?;
    let meta = serde_json::json!({ "projection": spec, "seed": seed });
    forcing.generator = Some(meta.clone());
    response.generator = Some(meta);
    Ok(ProjectionData { forcing, response })
}

/// Coarse-grid input for downscaling: bilinear coarsening of `fine` plus a
/// per-variable additive bias.
pub fn coarsen_with_bias(fine: &Dataset, coarse: &GridSpec, bias: f64) -> Result<Dataset> {
    let mut out = regrid_dataset(fine, coarse)?;
    let cells = coarse.cells();
    let nv = out.num_vars();
    for t in 0..out.len() {
        let frame = out.frame_mut(t);
        for v in 0..nv {
            let b = bias * (1.0 + v as f64 * 0.5);
            for x in &mut frame[v * cells..(v + 1) * cells] {
                *x += b as f32;
            }
        }
    }
    Ok(out)
}
