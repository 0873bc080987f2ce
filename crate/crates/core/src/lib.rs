//! Semantic classification of 3D point cloud scenes with multi-scale voxel CNNs.
//!
//! The crate covers the full pipeline: PLY I/O and label remapping, spatial
//! queries over immutable clouds, binary occupancy grid extraction at several
//! voxel sizes around a point, training-time augmentation, class-balanced
//! sampling, a from-scratch 3D CNN with training loop, and scene-level
//! inference that classifies a subsampled cloud and transfers labels back to
//! every original point.
//!
//! Numeric code is generic over the scalar type through [`Scalar`]
//! (instantiated as `f32` in production and `f64` where tests compare against
//! finite differences); cloud coordinates are always `f64`.

pub mod augment;
pub mod cloud;
pub mod error;
pub mod eval;
pub mod nn;
pub mod ply;
pub mod sampler;
pub mod spatial;
pub mod synthetic;
pub mod train;
pub mod voxel;

pub use cloud::{LabelMapping, LabeledCloud};
pub use error::{Error, Result};
pub use eval::{classify_cloud, metrics, ClassifyConfig, ConfusionMatrix};
pub use nn::{Model, ModelSpec, Scalar};
pub use ply::{load_ply, save_ply};
pub use spatial::SpatialIndex;
pub use train::{train, TrainConfig};
pub use voxel::{GridSpec, MultiScaleSample, OccupancyGrid};

/// A point position; coordinates are kept in double precision end to end.
pub type Point = [f64; 3];

/// Class label attached to a point.
pub type Label = u32;

/// Production networks run in single precision.
pub type Model32 = nn::Model<f32>;
/// Double precision instantiation, used when checking gradients.
pub type Model64 = nn::Model<f64>;
/// Occupancy grids as consumed by the production network.
pub type OccupancyGrid32 = voxel::OccupancyGrid<f32>;
/// Tensor alias matching [`Model32`].
pub type Tensor32 = nn::Tensor<f32>;
/// Tensor alias matching [`Model64`].
pub type Tensor64 = nn::Tensor<f64>;
