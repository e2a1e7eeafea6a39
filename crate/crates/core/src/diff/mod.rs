//! Minimal reverse-mode differentiable numerics: tensors, a recording tape,
//! dense and graph layers, Adam, and finite-difference gradient checking.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport, GradMismatch};
pub use layers::{GraphEncoder, Linear, Mlp};
pub use optim::{optimizer_step, optimizer_step_filtered, OptimizerConfig, StepReport};
pub use params::{ParamId, Parameter, ParameterSet};
pub use tape::{sigmoid, softplus, Tape, Var};
pub use tensor::{euclidean, Tensor};
