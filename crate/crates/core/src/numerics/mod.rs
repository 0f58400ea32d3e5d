//! Dense tensors, a reverse-mode tape over the op set the models need,
//! the Adam optimizer and the checkpoint container.

mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use kernels::{bilinear_affine, bilinear_resize};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter, StatUpdate};
pub use tape::{first_argmax, Gradients, Tape, Var, BCE_EPS};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
