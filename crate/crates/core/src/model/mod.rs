//! Architecture description, weights, and the gated forward/backward pass.

mod network;
mod spec;
mod weights;

pub use network::{
    backward, correct_predictions, forward, loss, loss_and_grad, loss_and_grads, BlockGateGrad, BlockSample,
    ForwardTrace, GateGrads, GateSample, Targets,
};
pub use spec::{Activation, BlockSpec, ConvDescriptor, NetworkSpec, SkipKind, Task};
pub(crate) use spec::line_of;
pub use weights::{BlockWeights, WeightSet};
