//! The forecasting network, its configuration, positional-embedding
//! interpolation and checkpoint I/O.

pub mod checkpoint;
pub mod climax;
pub mod config;
pub mod patch;
pub mod posembed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use climax::{
    add_projection_head, add_variables, forward, init_params, is_positional, projection_forward,
    ForwardOutput, ForwardRequest, LeadTime, TokenWindow,
};
pub use config::{ModelConfig, ProjectionHead};
pub use posembed::{interpolate_pos_embed, retarget_grid};
