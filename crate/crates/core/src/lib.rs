//! Meta-learned test-time optimization for articulated pose recovery.
//!
//! The core is generic over the scalar type; [`f64`] aliases are provided at
//! the crate root for the common case.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod body_model;
pub mod diffcore;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod regressor;
pub mod scalar;
pub mod synth;
pub mod training;

pub use scalar::Scalar;

pub type ParamVec = diffcore::ParamVector<f64>;
pub type GradVec = diffcore::GradientVector<f64>;
pub type Body = body_model::BodyParams<f64>;
pub type Camera = body_model::CameraParams<f64>;
pub type Human = body_model::Skeleton<f64>;
