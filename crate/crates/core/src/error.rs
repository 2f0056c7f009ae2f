use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(
        "non-local attention over {positions} positions exceeds the cap of {cap}; \
         apply NL-FPN attention only at the coarse (stride 16) level or raise the cap"
    )]
    AttentionTooLarge { positions: usize, cap: usize },

    #[error("the model has no segmentation heads")]
    MissingSegHeads,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("data source: {0}")]
    Data(String),
}
