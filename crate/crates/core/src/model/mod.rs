//! The four segmentation networks and their checkpoint format.

pub mod blocks;
pub mod checkpoint;
mod config;
mod net;
mod params;
pub mod shapes;

pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, Variant, DEPTH, DOWNSAMPLES};
pub use net::{count_parameters, parameter_specs, Forward, Model};
pub use params::{named_rng, Init, ParamBuilder, ParamSet, ParamSpec};
pub use shapes::{shape_chain, ShapeStep};
