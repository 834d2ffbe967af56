//! Minimal tensor library: reverse-mode autodiff, the layer set used by the
//! agent and generator networks, guided backpropagation, and Adam.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod reference;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheckOpts, GradCheckReport};
pub use layers::{ForwardOpts, ForwardPass, Layer, LayerSpec, Sequential};
pub use tape::{BatchStats, BnMode, GradMode, NodeId, Tape};
pub use tensor::Tensor;
