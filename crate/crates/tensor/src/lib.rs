//! Small dense tensor library: NHWC conv kernels, a per-forward-pass
//! gradient tape, and the Adam / cosine-SGD optimizers.
//!
//! Everything is deterministic. Kernels that run in parallel split work
//! into fixed-size units and reduce partial results in unit order, so the
//! output does not depend on the number of rayon threads (or on whether the
//! `parallel` feature is enabled at all).

pub mod conv;
mod element;
mod error;
pub mod exec;
pub mod init;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use conv::Padding;
pub use element::Element;
pub use error::{Result, TensorError};
pub use optim::{sgd_cosine_step, Adam, AdamConfig, CosineSchedule};
pub use tape::{Gradients, Tape, Var, L2_EPS};
pub use tensor::Tensor;
