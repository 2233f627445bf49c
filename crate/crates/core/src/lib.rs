//! Optimal sensor placement in space and time for a semilinear parabolic
//! data assimilation problem, posed as a bilevel optimization.
//!
//! Every numerical type is generic over the scalar; the aliases below fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod harness;
pub mod linalg;
pub mod lower;
pub mod mesh;
pub mod pde;
pub mod scalar;
pub mod sparsity;
pub mod upper;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Grid = mesh::SpatialGrid<f64>;
pub type Time = mesh::TimeGrid<f64>;
pub type Model = pde::Model<f64>;
pub type Field = pde::SpatialField<f64>;
pub type Trajectory = pde::SpaceTimeField<f64>;
pub type Placement = upper::PlacementVector<f64>;
pub type Penalty = sparsity::PenaltyFamily<f64>;
pub type Bilevel<'a> = upper::BilevelProblem<'a, f64>;
