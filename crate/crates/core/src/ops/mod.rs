//! Layer primitives with exact backward passes.

pub mod activation;
pub mod augment;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{elu, elu_backward, elu_derivative, elu_forward, relu_backward, relu_forward, EluParams};
pub use augment::{pad_crop_flip, CropSpec};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_mode, BatchNormState, BnCache, Mode, BN_EPSILON,
    BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_direct, ConvGrads, ConvParams};
pub use linear::{fully_connected_backward, fully_connected_forward, LinearGrads};
pub use loss::{count_errors, softmax_cross_entropy};
pub use pool::{global_avg_pool_backward, global_avg_pool_forward};
