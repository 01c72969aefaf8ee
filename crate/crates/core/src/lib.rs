//! Dendritic-tree neuron layers with tunable branching factor and input
//! dropout, a small reverse-mode autodiff core, masked-dense and sparse
//! execution backends, and an MNIST experiment harness.

pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod results;
pub mod sparse;
pub mod tensor;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
pub use sparse::Backend;
pub use models::{Family, Model, ModelSpec, Task};
pub use tensor::{Element, Tensor};
pub use tree::{count_parameters, ParamCount, TreePlan};
