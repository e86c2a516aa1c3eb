//! Data-free knowledge amalgamation from multiple multi-label teachers.
//!
//! A group-stack generator is trained against discriminators assembled from
//! frozen teacher blocks; a dual generator is then trained block by block on
//! the synthesized images and features, and regrouped into a hierarchical
//! multi-branch classifier.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use autodiff::{Activation, Param, PoolKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
