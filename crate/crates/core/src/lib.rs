//! Hierarchical multi-scale attention for semantic segmentation.
//!
//! A small, self-contained stack: a reverse-mode autodiff tensor engine,
//! a segmentation network with semantic, attention and auxiliary heads,
//! N-scale attention fusion, a two-scale trainer, hard-threshold
//! auto-labelling and a synthetic-scene evaluation harness.

pub mod autolabel;
pub mod config;
pub mod error;
pub mod fusion;
pub mod inference;
pub mod labels;
pub mod pgm;
pub mod segnet;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_ID};
