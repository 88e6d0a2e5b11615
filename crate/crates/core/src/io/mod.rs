//! Files on disk, synthetic data and configuration.

pub mod config;
pub mod dataset;
pub mod formats;
pub mod markdown;
pub mod synthetic;

pub use dataset::{Frame, SequenceDataset};
pub use formats::{
    load_depth_map, load_feature_map, load_png, save_depth_map, save_feature_map, save_png,
};
pub use synthetic::{
    generate_synthetic, random_scene, SceneLayout, SyntheticScene, SyntheticSpec, TrajectoryKind,
};
