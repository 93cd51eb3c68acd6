//! Differentiable layer set for the residual network: forward ops paired with
//! explicit reverse passes, a named parameter store and momentum SGD.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod params;
pub mod tensor;

pub use attention::{attention_pool, attention_pool_backward, AttentionCache, AttentionGrads, AttentionParams};
pub use conv::{conv2d, conv2d_accumulate, conv2d_backward};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{dense, dense_backward, dropout, pooled_shortcut, relu, softmax_xent, zero_invalid};
pub use norm::{batch_norm, batch_norm_backward, BnCache, BnGrads, BnParams, Mode, BN_EPSILON, BN_MOMENTUM};
pub use params::{sgd_step, ParamId, ParamKind, ParamStore, SgdConfig};
pub use tensor::{Real, Tensor};
