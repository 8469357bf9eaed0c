//! Piecewise-deterministic controlled processes on star-shaped networks:
//! geometry, dynamics, simulation, value functions and linearized programs.

// `!(x > 0)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments, clippy::type_complexity)]

pub mod control_projection;
pub mod error;
pub mod hjb;
pub mod linearize;
pub mod model;
pub mod network;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Star network with `f64` coordinates.
pub type Network = network::StarNetwork<f64>;
/// Extended network with `f64` coordinates.
pub type Extended = network::ExtendedNetwork<f64>;
/// Network point with `f64` coordinate.
pub type Point = network::NetworkPoint<f64>;
/// Coefficient-backed model over `f64`.
pub type Model = model::CoefficientModel<f64>;
