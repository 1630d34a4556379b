//! Minimal layer library with explicit forward and backward passes.

pub mod conv;
pub mod init;
pub mod layers;
pub mod params;

pub use conv::Conv2d;
pub use init::Init;
pub use layers::{BatchNorm2d, Linear, MaxPool2d, LEAKY_SLOPE};
pub use params::{Gradients, ParamId, ParamStore};
