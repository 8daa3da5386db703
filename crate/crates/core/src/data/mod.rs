//! Volumes, preprocessing, phantoms and dataset splits.

pub mod dataset;
pub mod phantom;
pub mod preprocess;
pub mod split;
pub mod volume;

pub use dataset::{generate_dataset, DatasetRef, Manifest, ManifestRow, PhantomOptions, Sample};
pub use phantom::{generate_phantom, render_scan, PhantomSpec, SiteParams};
pub use preprocess::{mip_mask, normalize_intensity, pad_crop};
pub use split::{apportion, split_dataset, Split, SplitIndices, STRATA};
pub use volume::{inspect, Metadata, Semantics, Volume, VolumeHeader};
