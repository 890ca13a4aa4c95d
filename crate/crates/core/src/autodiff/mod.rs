//! Reverse-mode differentiation, parameters, optimizers and gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{grad_check, rel_err, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{EmptyRows, Gradients, Graph, NodeId};
pub use optim::{sgd_step, AdamW, AdamWConfig};
pub use params::{Param, ParamStore};
