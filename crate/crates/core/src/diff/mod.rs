//! Differentiable computation substrate: tensors, a reverse-mode tape,
//! named parameters, Adam, checkpoints and gradient checking.

pub mod checkpoint;
pub mod dd;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use dd::Dd;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use float::Float;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, NumericPrecision, Objective};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{Initializer, ParameterStore};
pub use tensor::Tensor;
