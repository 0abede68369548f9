//! Reverse-mode differentiation over dense NCHW tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] then fills in
//! gradients for every leaf created with [`Graph::param`].

mod adam;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
mod tensor;

use std::collections::BTreeMap;

pub use adam::{adam_step, lr_schedule, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use graph::{BnState, Graph, Mode, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::{Real, Tensor};

/// Parameter or buffer tensors keyed by a stable dotted name.
pub type NamedTensors<T> = BTreeMap<String, Tensor<T>>;
