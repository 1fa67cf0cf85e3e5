//! Scalar-generic building blocks for masked-token motion recovery: rotation
//! and trajectory geometry, a kinematic body proxy, token mask generation,
//! evaluation metrics, and a dense reverse-mode autodiff tape.

pub mod autodiff;
pub mod body;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod masking;
pub mod metrics;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Rotation6D32 = geometry::Rotation6D<f32>;
pub type Rotation6D64 = geometry::Rotation6D<f64>;
pub type Trajectory32 = geometry::Trajectory<f32>;
pub type Trajectory64 = geometry::Trajectory<f64>;
pub type TrajectoryFrame32 = geometry::TrajectoryFrame<f32>;
pub type TrajectoryFrame64 = geometry::TrajectoryFrame<f64>;
pub type Camera32 = geometry::CameraIntrinsics<f32>;
pub type Camera64 = geometry::CameraIntrinsics<f64>;
pub type Skeleton32 = body::SkeletonConfig<f32>;
pub type Skeleton64 = body::SkeletonConfig<f64>;
pub type PointSeq32 = linalg::PointSeq<f32>;
pub type PointSeq64 = linalg::PointSeq<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
