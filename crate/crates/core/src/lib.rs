//! Fine-tuning laboratory: periodic re-initialization of the classification
//! head with cyclic learning rates (RIFLE), explicit transfer regularizers,
//! perturbation baselines, gradient telemetry and the two-MLP oracle
//! transfer experiment.

// `!(x >= 0.0)` is used on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod par;
pub mod params;
pub mod regularizers;
pub mod rng;
pub mod schedules;
pub mod tensor;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use params::{Gradients, ParamStore, Role};
pub use rng::Rng;
pub use tensor::Tensor;
