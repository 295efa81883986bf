//! Layer kernels with hand-derived backward passes.

mod activation;
mod conv;
mod dense;
mod dropout;
mod pool;

pub use activation::{relu, relu_backward, softmax};
pub use conv::{ConvGrads, ConvLayer, ConvTransposeLayer};
pub use dense::{DenseGrads, DenseLayer};
pub use dropout::{dropout_backward, dropout_forward, DropoutMask};
pub(crate) use dropout::check_p_keep;
pub use pool::{
    maxpool2_backward, maxpool2_forward, unpool_duplicate_backward, unpool_duplicate_forward,
    PoolSwitches,
};
