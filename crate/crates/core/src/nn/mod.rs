//! Dense layers, exact reverse-mode gradients and Adam for the velocity-field
//! architecture family.

pub mod checkpoint;
mod layers;
mod params;

pub use layers::{
    backward, sigmoid, silu, softplus, Backprop, LayerKind, LayerSpec, Network, Tape,
};
pub use params::{AdamConfig, Gradients, ParamStore};
