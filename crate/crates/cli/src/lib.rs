//! File formats, dataset generation, the training loop, and the `hmseg`
//! command line on top of [`hmseg_core`].
//!
//! The core crate computes; this crate persists and orchestrates. On-disk
//! formats (tensor containers, sample files, checkpoints, CSV reports) all
//! round-trip bit-exactly, and every command is deterministic given its
//! seed, so runs can be compared byte for byte.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod evaluate;
pub mod samples_io;
pub mod trainer;
