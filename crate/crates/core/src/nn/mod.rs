//! From-scratch 3D CNN: tensors, layers with explicit forward and backward
//! passes, model assembly and checkpointing.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, ParameterStore};
pub use layers::Param;
pub use model::{ArchKind, BatchInput, Model, ModelSpec, TrainCache};
pub use tensor::Tensor;

/// Floating point scalar the numeric stack is generic over. Implemented by
/// `f32` (production) and `f64` (gradient checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Shorthand conversion from `f64` literals into the working scalar.
pub(crate) fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 representable in scalar type")
}
