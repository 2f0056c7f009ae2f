//! Differentiable tensor operations.
//!
//! Operations assert on shape misuse: callers (the layers and blocks) check
//! user-facing preconditions and report them as [`crate::Error`]s first.

mod attention;
mod conv;
mod norm;
mod pointwise;
mod spatial;

pub use attention::{attention_context, similarity_matrix};
pub use conv::{conv2d, ConvGeometry};
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats};
pub use pointwise::*;
pub use spatial::{
    concat_channels, global_avg_pool, mul_channel, softmax_channels, upsample_bilinear2x,
    upsample_nearest2x,
};
