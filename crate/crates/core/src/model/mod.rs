//! Minimal differentiable core: layers with batch norm, losses, Adam and
//! FLOP accounting.

pub mod codec;
mod engine;
pub mod flops;
pub mod loss;
mod optim;
mod state;
pub mod zoo;

pub use engine::{
    backward, backward_with_representation, forward, infer, ForwardTrace, Gradients, Mode,
    ParamGrad,
};
pub use optim::{adam_step, AdamHyper, AdamState};
pub use state::{
    Activation, Footprint, Layer, LayerKind, LayerOp, ModelBuilder, ModelState, Param, Role,
};
pub use zoo::ModelSpec;
