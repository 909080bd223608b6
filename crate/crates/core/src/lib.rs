//! Ensemble-in-one: train an ensemble of sub-models inside one random gated
//! network (RGN) by diversifying path vulnerabilities, then derive robust
//! standalone models and evaluate them under transfer and white-box attacks.

pub mod arch;
pub mod attack;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod nn;
pub mod report;
pub mod rgn;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
