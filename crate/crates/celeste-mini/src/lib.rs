//! Distributed variational inference for astronomical catalogs.
//!
//! The model, the optimizer and validation live in `celeste_mini_core`; this
//! crate adds FITS and CSV IO, a partitioned global array, the dynamic-tree
//! scheduler, the multi-rank pipeline and the command-line front end.

pub mod bench;
pub mod cache;
pub mod catalog_io;
pub mod cli;
pub mod config;
pub mod fits;
pub mod global_array;
pub mod pipeline;
pub mod records;
pub mod scheduler;
pub mod survey;

pub use celeste_mini_core as core;
