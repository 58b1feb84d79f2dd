// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod co4;
pub mod complexity;
pub mod config;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod grammar;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod train;

pub use autodiff::{Graph, Mask, ParamVars, Var};
pub use checkpoint::Checkpoint;
pub use co4::{AgentStreams, Co4LayerConfig, ContextSet};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{LayerKind, ModelConfig};
pub use optim::{Scheduler, TrainConfig};
pub use tensor::{Dtype, Scalar, Tensor, TensorSet};
pub use text::{Batch, Vocab};
