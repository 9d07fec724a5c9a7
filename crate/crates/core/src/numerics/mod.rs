//! Dense tensors, a reverse-mode tape, optimizers, and gradient checking.

mod gradcheck;
mod ops;
mod optim;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use ops::{BatchStats, NormStats};
pub use optim::{adam_update, sgd_update, Adam, AdamConfig, Sgd, SgdConfig};
pub use real::Real;
pub use tape::{ConvGeom, Grads, Tape, Var};
pub use tensor::{digest, Tensor};
