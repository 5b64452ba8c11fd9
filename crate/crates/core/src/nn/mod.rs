//! Differentiable-computation substrate: a recording tape, weight-normalized
//! dense layers, residual networks, AdamW and parameter files.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use layers::{kaiming_init, silu, DenseLayer, GainInit, ResNet, ResNetShape, ResidualBlock};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig, StepStats};
pub use params::{Binding, ParamId, ParamStore};
pub use scalar::Real;
pub use tape::{Gradients, Tape, Var};
