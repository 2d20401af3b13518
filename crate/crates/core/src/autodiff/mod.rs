//! Minimal dense reverse-mode differentiation: a tape of 2-D `f64` ops,
//! named parameters, momentum SGD, and a finite-difference checker.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod tensor;


pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{log_sum_exp, sigmoid, softmax_in_place, softplus, CircleMargins, Graph, Var, INSTANCE_NORM_EPS};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use params::{InitRecord, InitScheme, Param, ParamStore};
pub use tensor::Tensor;
