//! Run configuration: a TOML file, `--override` patches applied to the raw
//! tree, then typed sections. Unknown keys are rejected rather than ignored.

use std::fs;
use std::path::{Path, PathBuf};

use gridformer_core::grid::{
    read_dataset, denormalize, generate_synthetic, Dataset, ProjectionSpec, Region, SynthSpec, VariableVocabulary,
};
use gridformer_core::model::ModelConfig;
use gridformer_core::training::{FinetuneConfig, PretrainConfig, ProtocolSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_data: Option<GenDataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regrid: Option<RegridSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2s: Option<S2sSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downscale: Option<DownscaleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<ProjectSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSection>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Desk,
    Paper,
}

/// A preset plus field overrides. An empty `variables` list and unset grid
/// fields are filled from the data the command runs on.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub variables: Vec<String>,
    #[serde(flatten)]
    pub fields: toml::Table,
}

impl ModelSection {
    pub fn resolve(&mut self, data_vars: &[String], data_grid: Option<(usize, usize)>) -> Result<ModelConfig, CliError> {
        if self.variables.is_empty() {
            self.variables = data_vars.to_vec();
        }
        if let Some((h, w)) = data_grid {
            self.fields.entry("grid_height").or_insert(toml::Value::Integer(h as i64));
            self.fields.entry("grid_width").or_insert(toml::Value::Integer(w as i64));
        }
        let vocab = VariableVocabulary::new(self.variables.clone())?;
        let base = match self.preset {
            Preset::Toy => ModelConfig::toy(vocab),
            Preset::Desk => ModelConfig::desk(vocab),
            Preset::Paper => ModelConfig::paper(vocab),
        };
        let mut tree = toml::Table::try_from(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
        for (k, v) in &self.fields {
            if k == "vocabulary" || !tree.contains_key(k) && k != "projection" {
                return Err(CliError::Validation(format!("unknown model field `{k}`")));
            }
            tree.insert(k.clone(), v.clone());
        }
        // Echo every field so the resolved config no longer depends on presets.
        for (k, v) in &tree {
            if k != "vocabulary" {
                self.fields.insert(k.clone(), v.clone());
            }
        }
        let cfg: ModelConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("model: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A dataset on disk or generated in place from a synthetic spec.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl DataRef {
    pub fn absolutize(&mut self) -> Result<(), CliError> {
        if let Some(p) = &mut self.path {
            *p = absolute(p)?;
        }
        match (&self.path, &self.synth) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(CliError::Validation("a dataset needs exactly one of `path` or `synth`".into())),
        }
    }

    /// Loads the series in physical units; `label` separates the noise
    /// streams of generated datasets within one run.
    pub fn load(&self, seed: u64, label: &str) -> Result<Dataset, CliError> {
        match (&self.path, &self.synth) {
            (Some(p), _) => load_raw(p),
            (None, Some(spec)) => Ok(generate_synthetic(spec, derive_seed(seed, label))?),
            (None, None) => Err(CliError::Validation("a dataset needs `path` or `synth`".into())),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub bias: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    /// Also writes a biased, coarsened copy of the synthetic series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<CoarseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<ProjectionSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegridSection {
    pub input: PathBuf,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSection {
    pub input: PathBuf,
    pub region: Region,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct S2sSection {
    pub input: PathBuf,
    pub targets: Vec<String>,
    #[serde(default = "two_weeks")]
    pub lead_hours: i64,
    #[serde(default = "two_weeks")]
    pub window_hours: i64,
}

fn two_weeks() -> i64 {
    336
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub sources: Vec<DataRef>,
    /// Trailing share of each source held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Continue from these weights instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub train: PretrainConfig,
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_splits() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    /// Pretrained weights; without one the model trains from scratch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub data: DataRef,
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub train: FinetuneConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Direct,
    Rollout,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Ground truth.
    pub data: DataRef,
    /// Precomputed forecasts aligned with `data`; scored instead of running
    /// the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Empty means every dynamic variable.
    #[serde(default)]
    pub targets: Vec<String>,
    #[serde(default = "default_leads")]
    pub leads: Vec<u32>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_step")]
    pub step_hours: u32,
}

fn default_leads() -> Vec<u32> {
    vec![72]
}

fn default_step() -> u32 {
    6
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    /// Index of the initial condition.
    #[serde(default)]
    pub start: usize,
    pub horizon_hours: u32,
    #[serde(default = "default_step")]
    pub step_hours: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownscaleSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub fine: DataRef,
    /// Coarse inputs; generated from `fine` via `coarse_grid` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<DataRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_grid: Option<CoarseSpec>,
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    #[serde(default)]
    pub train: FinetuneConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<PathBuf>,
    /// Generates forcing and response instead of reading them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<ProjectionSpec>,
    #[serde(default = "default_history")]
    pub history: usize,
    #[serde(default = "default_splits")]
    pub splits: [f64; 3],
    /// Train only LayerNorms and new layers.
    #[serde(default = "yes")]
    pub frozen: bool,
    #[serde(default)]
    pub train: FinetuneConfig,
}

fn default_history() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default = "default_lead")]
    pub lead_hours: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            eps: default_eps(),
            threshold: default_threshold(),
            batch: 1,
            lead_hours: default_lead(),
        }
    }
}

fn default_eps() -> f64 {
    gridformer_core::gradcheck::DEFAULT_EPS
}

fn default_threshold() -> f64 {
    1e-4
}

fn one() -> usize {
    1
}

fn default_lead() -> f64 {
    24.0
}

/// Reads the config file (if any), applies `key=value` overrides and
/// deserializes, failing on keys no section understands.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut tree = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let mut ignored = Vec::new();
    let cfg: RunConfig = serde_ignored::deserialize(toml::Value::Table(tree), |p| ignored.push(p.to_string()))
        .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
    if !ignored.is_empty() {
        return Err(CliError::Validation(format!("unknown config keys: {}", ignored.join(", "))));
    }
    Ok(cfg)
}

/// Sets a dotted key; the value is parsed as TOML and kept as a string when
/// it does not parse.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("override key `{key}` is malformed")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut node = tree;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

pub fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
}

pub fn absolutize_opt(p: &mut Option<PathBuf>) -> Result<(), CliError> {
    if let Some(x) = p {
        *x = absolute(x)?;
    }
    Ok(())
}

/// Reads a GTB dataset and returns it in physical units.
pub fn load_raw(p: &Path) -> Result<Dataset, CliError> {
    if !p.exists() {
        return Err(CliError::Validation(format!("no such file: {}", p.display())));
    }
    let mut ds = read_dataset(p)?;
    if let Some(stats) = ds.norm.take() {
        denormalize(&mut ds, &stats)?;
    }
    Ok(ds)
}

/// Independent stream per purpose, all derived from the run seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}
