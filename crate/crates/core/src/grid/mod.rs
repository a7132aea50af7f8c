//! Gridded datasets: geometry, normalization, regridding, regional crops,
//! sub-seasonal targets, synthetic generators and the GTB container.

pub mod crop;
pub mod dataset;
pub mod gtb;
pub mod norm;
pub mod regrid;
pub mod s2s;
pub mod spec;
pub mod synth;

pub use crop::{crop_dataset, crop_indices, crop_region, CropIndices, Region};
pub use dataset::{Dataset, GriddedSample, TimeAxis};
pub use gtb::{read_dataset, write_dataset, DatasetManifest};
pub use norm::{compute_norm_stats, denormalize, normalize, NormStats, VarStats};
pub use regrid::{regrid_bilinear, regrid_dataset, resize_bilinear};
pub use s2s::{build_s2s_targets, S2sPairs};
pub use spec::{GridSpec, VariableVocabulary};
pub use synth::{generate_projection, generate_synthetic, Family, ProjectionSpec, SynthSpec};
