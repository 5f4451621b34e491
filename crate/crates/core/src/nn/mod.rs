//! Minimal neural-network engine: tensors flow through declarative layer
//! stacks with full backprop, CE/KL losses, tempered softmax, and SGD.

pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod optim;
pub mod spec;
pub mod state;

pub use gradcheck::gradient_check;
pub use loss::{
    cross_entropy, kl_divergence, loss_and_grad, softmax_rows, softmax_with_temperature, LossEval,
    LossKind, LossSpec,
};
pub use net::forward;
pub use optim::{train_step, train_step_detailed, Optimizer, OptimizerConfig};
pub use spec::{
    constant_param_spec, student_spec, student_spec_with_head, LayerSpec, ModelSpec, Padding, Shape,
};
pub use state::{Mode, ModelState};
