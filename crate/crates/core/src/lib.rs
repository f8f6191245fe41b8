//! # spinloc
//!
//! Simulation and evaluation toolkit for multi-robot relative localization
//! with a single monocular camera that is spun around the yaw axis of a
//! nano quadrotor.
//!
//! ## Modules
//!
//! - [`geometry`]: rigid transforms, pinhole projection, frame annotation,
//!   pose interpolation and extrinsic rotation refinement
//! - [`dynamics`]: Newton-Euler quadrotor model, motor mixing and kinematic
//!   flight scenario generation
//! - [`perception`]: bounding-box and grid detection decoders plus a
//!   seeded detector simulator that stands in for the CNNs
//! - [`downwash`]: ellipsoid safety condition and belief-set downwash
//!   prediction
//! - [`eval`]: success rate, optimal assignment, error statistics and
//!   classification metrics
//! - [`datasets`]: file formats, pose log ingestion and time-offset
//!   estimation

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod downwash;
pub mod dynamics;
pub mod eval;
pub mod geometry;
pub mod perception;

pub use geometry::{RigidTransform, Rotation, Vec3};

/// Gravitational acceleration [m/s²].
pub const GRAVITY: f64 = 9.81;
