//! Differentiable primitives.

mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod softmax;
mod spatial;

pub use elementwise::{
    activation, add, mul, relu, reshape, scale, scale_per_sample, sigmoid_f64, sub, Activation,
};
pub(crate) use elementwise::{sigmoid_t, softplus_t};
pub use matmul::{add_bias_last, matmul};
pub(crate) use matmul::{mm, mm_nt_acc, mm_tn_acc};
pub use norm::{batch_norm, NormOutput, NormStats};
pub use reduce::{mean, reduce, sum, ReduceKind};
pub use softmax::{cross_entropy, softmax};
pub(crate) use softmax::{softmax_row, softmax_row_backward};
pub use spatial::{
    add_channel_bias, avgpool2d, conv2d, crop2d, global_avg_pool, nchw_to_tokens, pad2d,
    tokens_to_nchw,
};
