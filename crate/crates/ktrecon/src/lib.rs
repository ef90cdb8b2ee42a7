//! Reconstruction workbench for dynamic MRI sampled on k-t lattices.
//!
//! The crate simulates a dynamic cardiac phantom observed through a
//! multi-coil MR acquisition, undersamples it with a uniform k-t lattice,
//! and reconstructs it with classical baselines (zero-filling, temporal
//! average, sliding window, an x-f prior solver) and a family of learned
//! models (2D/3D U-Nets with optional data-consistency layers and a
//! temporal-average skip connection, plus an iterative time-frequency
//! network). Every reconstruction method sits behind the [`registry`]
//! module's `Reconstructor` trait and is selected by name at runtime.
//!
//! Axis order is `(time, ky, kx)` for single volumes and
//! `(coil, time, ky, kx)` for coil stacks. All Fourier transforms are
//! unitary and centered; see [`arrays`] for the conventions.

pub mod acquisition;
pub mod arrays;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod registry;
pub mod sense;
pub mod training;
pub mod util;

pub use error::{Error, Result};
