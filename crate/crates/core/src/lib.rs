//! Preference optimization with mirror-descent objectives on a tabular chain
//! environment, plus evolution-strategy search over learned mirror maps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod env;
pub mod error;
pub mod es;
pub mod loss_net;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod potential;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
