//! Small sequential networks with reverse-mode differentiation.

pub mod checkpoint;
mod kernels;
mod loss;
mod network;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use loss::{argmax_class, cross_entropy_loss, softmax, LossValue};
pub use network::{sgd_step, Layer, Model, Network, Padding, Tape};
pub use params::ParamMap;
