//! Differentiable numeric core: tensors, the reverse-mode tape, layers,
//! Adam and the finite-difference gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{gelu, sigmoid, AttentionSpec, Graph, Var};
pub use layers::{Activation, SeqLayout, StackConfig};
pub use optim::Adam;
pub use params::{Group, ParamId, ParameterStore};
pub use tensor::Tensor;
