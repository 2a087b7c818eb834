//! Dense-network substrate for the confidence and gating heads.

pub mod checkpoint;
mod dense;
mod optim;

pub use dense::{
    sigmoid, softmax, softmax_backward, Activation, Dense, DenseNet, LayerGrads, LayerShape, NetGrads, Tape,
};
pub use optim::{AdamConfig, AdamState, LrSchedule};
