//! Stateless forward and backward kernels.

mod activation;
mod conv;
mod dropout;
mod linear;
mod norm;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax, softmax_backward};
pub use conv::{conv2d, conv2d_backward, conv_out_len, Conv2dGrads, Conv2dOptions};
pub use dropout::dropout;
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use norm::{batch_norm, batch_norm_backward, BatchNormCache, BatchNormGrads, RunningStats};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward,
    PoolOptions,
};

/// Whether layers use batch statistics and stochastic regularisers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}
