//! Controller and Lyapunov networks, Adam, and the closed-loop system they
//! are trained on.

mod adam;
mod closed_loop;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use closed_loop::{
    closed_loop_step, delta_v, lyapunov_loss, one_hot, ClosedLoop, LossGrads, LossValue,
    StateGradients,
};
pub use mlp::{ForwardCache, Layer, Mlp, MlpCheckpoint};
