//! Dense tensors, reverse-mode autodiff, AdamW and the learning-rate schedule.

mod linalg;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::{adamw_step, AdamWConfig, GradAccumulator, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tape::{AttnMask, Graph, Var};
pub use tensor::{
    cross_entropy_logits, cross_entropy_probs, log_softmax, softmax, softmax_in_place, Tensor, PROB_FLOOR,
};
