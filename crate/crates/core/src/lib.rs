//! Differentiable volume rendering of voxel radiance fields with a
//! single-surface weighting scheme for scenes seen through water.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod field;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod render;
pub mod scene;
pub mod trainer;

pub use checkpoint::{Checkpoint, RenderSettings};
pub use error::{Error, Result};
pub use field::VoxelField;
pub use geometry::{Camera, RayBatch, SampleSet};
pub use render::{RendererKind, SurfaceParams};
pub use scene::{Dataset, SceneSpec};
pub use trainer::{train, TrainConfig, TrainLog};
