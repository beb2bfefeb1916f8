//! Consistency-model training on Gaussian-mixture data with closed-form
//! ground truth: noise schedules, score oracles, variance-reduced targets,
//! the PF-ODE viewed as an MDP, a small MLP consistency function, training
//! schedules, samplers and distribution metrics.


// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod mdp;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod target;
pub mod trainer;

pub use error::{Error, Result};
