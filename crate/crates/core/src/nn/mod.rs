//! Minimal layer toolkit: exactly the layers the model needs, each with an
//! eval path, a recorded training path and reverse-mode gradients.

mod layers;
mod ops;
mod tape;

pub use layers::{fuse_conv_bn_relu, BatchNorm2d, BatchStats, BnCache, Conv2d, FusedConv, Linear, Param};
pub use ops::{
    attention_pool, from_tokens, maxpool2d, maxpool_out_dim, relu, softmax, to_tokens, Axis, PoolCache,
};
pub use tape::{GradTape, Gradients};

/// BatchNorm behaviour selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
