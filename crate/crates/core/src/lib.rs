//! Score-based tests for a change-plane (subgroup) effect in regression models.
//!
//! The crate fits the null model, forms the weighted-average score test
//! ([`wast`]) and the supremum of squared score statistics ([`sst`]), calibrates
//! both by resampling, and reproduces simulation studies ([`sim`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod rng;
pub mod sim;
pub mod special;
pub mod sst;
pub mod wast;
pub mod weights;

pub use data::{ColumnSpec, Dataset};
pub use error::{Error, Result};
pub use models::{FamilyKind, FitOptions, NullFit};
pub use weights::{WeightMatrix, WeightSpec};
