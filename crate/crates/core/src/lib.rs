//! Joint tissue-and-lesion segmentation from hetero-modal, disjointly
//! annotated datasets.
//!
//! This crate holds the numeric core: a dense `f64` tensor type with
//! reverse-mode differentiation, the probabilistic Jaccard loss and its
//! tissue/lesion split, a modality-averaging dilated-residual network,
//! synthetic brain phantoms with known ground truth, patch sampling,
//! the three empirical risk estimators with their upper-bound audit,
//! and Adam.
//!
//! Everything here is pure computation over `alloc`; file formats, the
//! training loop and the command line live in the companion `hmseg-cli`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod risk;
pub mod sampling;
pub mod stats;
pub mod tensor;

mod math;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
