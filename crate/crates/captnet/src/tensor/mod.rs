//! Dense tensor storage and a reverse-mode autodiff tape.
//!
//! The canonical image layout is `[N, C, H, W]`. Training runs in `f32`;
//! gradient checking switches the whole stack to `f64` through the
//! [`Element`] parameter.

mod data;
mod gradcheck;
mod kernels;
mod tape;

pub use data::{Element, TensorData};
pub use gradcheck::{grad_check, grad_check_container, relative_err, GradRow};
pub use tape::{Gradients, NodeId, Param, ParamContainer, ParamId, Tape, Tensor};
