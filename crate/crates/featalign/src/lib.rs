//! Feature alignment: training an encoder so that features extracted by
//! gradient descent on its own input reconstruct the original input, with
//! variational, adversarial, and local-training variants.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod imgio;
pub mod local;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runner;
pub mod tensor;
pub mod vfa;

pub use error::{Error, Result};
