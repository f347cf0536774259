//! Forward and backward passes for every layer kind the networks use.
//!
//! All layers work on single channels-first `[C, H, W]` images (or flat
//! vectors for the fully-connected ones); batching is done by the trainer.

mod conv;
mod dense;
mod inception;
mod local;
mod pool;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use dense::{
    dropout, dropout_backward, fully_connected, fully_connected_backward, relu, relu_backward,
    Dropout, FcGrads, Mode,
};
pub use inception::{
    inception_backward, inception_forward, inception_forward_cached, InceptionBranch,
    InceptionCache, InceptionGrads, InceptionParams, InceptionSpec,
};
pub use local::{
    locally_connected_backward, locally_connected_forward, LocalGrads, LocalSpec,
};
pub use pool::{maxpool2d, maxpool2d_backward, maxpool2d_padded, PoolOutput};

/// Weight and bias of one convolution-like layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a> {
    pub weights: &'a crate::Tensor,
    pub bias: &'a crate::Tensor,
}
