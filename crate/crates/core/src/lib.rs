//! Core algorithms for ground-level habitat image classification.
//!
//! Everything here is a pure function of its inputs and a seed, and needs
//! only `alloc`. File formats, image decoding, the neural network and the
//! HTTP service live in the `habitat` crate.
//!
//! The modules follow the pipeline order:
//!
//! * [`taxonomy`] - the habitat label space and its canonical ordering.
//! * [`record`] - image records and the corpus manifest.
//! * [`folds`] - stratified k-fold assignment.
//! * [`balance`] - per-class subsampling / augmentation to a fixed count.
//! * [`raster`], [`preprocess`], [`augment`] - pixel pipelines.
//! * [`early_stopping`] - patience-based stopping rule.
//! * [`metrics`] - confusion matrices, one-vs-rest scores, top-k accuracy.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod balance;
pub mod early_stopping;
pub mod error;
pub mod folds;
pub mod metrics;
pub mod preprocess;
pub mod raster;
pub mod record;
pub mod rng;
pub mod taxonomy;

pub use error::{Error, Result};
pub use taxonomy::{ClassTaxonomy, HabitatClass};
