//! Habitat photo classification: dataset ingestion, training with k-fold
//! cross-validation, evaluation reports, an HTTP inference service and the
//! `habitat` command-line tool.
//!
//! Pure algorithms (taxonomy, folds, balancing, augmentation, metrics) live
//! in `habitat-core`; this crate adds file formats, the neural network and
//! everything that touches the outside world.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod model;
pub mod report;
pub mod service;
pub mod taxonomy;
pub mod training;

pub use error::{HabitatError, Result};
pub use habitat_core as core;
