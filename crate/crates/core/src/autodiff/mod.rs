//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod nn;

pub use graph::{Activation, BnStats, Graph, NodeId};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, Stencil};

