//! Covert multi-bit watermarking of block-autoregressive token sources.
//!
//! The crate is organized bottom-up: [`prob`] holds the finite-alphabet
//! information measures, [`source`] the cover processes, [`capacity`] the
//! single-letter rate optimization, [`cmdp`] the per-block policy search,
//! [`polar`] the block codec and [`pipeline`] the multi-block experiments.

pub mod capacity;
pub mod cmdp;
pub mod manifest;
pub mod pipeline;
pub mod polar;
pub mod prob;
pub mod source;

pub use prob::{CondPmf, JointLaw, Pmf, Var};
pub use source::{CoverSource, FileSource, PairSource, StateId};
