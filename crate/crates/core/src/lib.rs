//! World-model pipeline for synthetic marketing panels.
//!
//! A simulated consumer panel is encoded into binary visible vectors, a deep
//! Boltzmann machine is trained on them and frozen, and the frozen model's
//! mean-field belief feeds three tasks: free-energy consistency scoring,
//! outcome prediction through small adapter heads, and counterfactual
//! treatment-effect estimation. Standard meta-learners and a causal forest
//! run on the raw features for comparison.

pub mod adapter;
pub mod causal;
pub mod checkpoint;
pub mod ebm;
pub mod encode;
pub mod error;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod simgen;
pub mod stats;

pub use error::{Result, WmError};
