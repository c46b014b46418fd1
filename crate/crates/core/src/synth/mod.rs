//! Synthetic moving-shapes videos with exact masks and trajectories, and the
//! color tracker used to read trajectories back out of generated video.

pub mod dataset;
pub mod render;
pub mod scene;
pub mod track;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, IndexEntry, Split};
pub use render::{generate_clip, LabeledClip};
pub use scene::{sample_scene, SceneSamplerConfig, SceneSpec};
pub use track::{track_entities, TrackState, TrackedTrajectory};
