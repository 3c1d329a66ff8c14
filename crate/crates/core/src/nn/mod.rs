//! Convolutional update network, its training machinery and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod network;

pub use conv::{ConvGrads, ConvLayer};
pub use network::{
    batch_loss_and_grads, sample_loss_and_grads, train_step, AdamState, NetGrads, NetworkSpec, NormSpec, TrainSample,
    UpdateNetwork,
};
