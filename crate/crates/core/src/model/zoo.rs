//! Small classifiers with the structural features the strategies rely on:
//! batch-norm layers, a named layer schema and a representation tap on the
//! penultimate layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::state::{Activation, ModelBuilder, ModelState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Two dense + batch-norm + ReLU blocks, then a dense head.
    Mlp { hidden: usize },
    /// Two 3x3 conv + batch-norm + ReLU blocks, global average pool, dense head.
    Cnn { channels: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp { hidden: 32 }
    }
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp { .. } => "toy-mlp",
            ModelSpec::Cnn { .. } => "toy-cnn",
        }
    }

    pub fn build<R: Rng>(&self, input_shape: &[usize], classes: usize, rng: &mut R) -> Result<ModelState> {
        if classes < 2 {
            return Err(Error::config("dataset.classes", "need at least two classes"));
        }
        match *self {
            ModelSpec::Mlp { hidden } => toy_mlp(input_shape, hidden, classes, rng),
            ModelSpec::Cnn { channels } => toy_cnn(input_shape, channels, classes, rng),
        }
    }
}

pub fn toy_mlp<R: Rng>(input_shape: &[usize], hidden: usize, classes: usize, rng: &mut R) -> Result<ModelState> {
    ModelBuilder::new(input_shape.to_vec())
        .dense("fc1", hidden)
        .batch_norm("bn1")
        .activation("relu1", Activation::Relu)
        .dense("fc2", hidden)
        .batch_norm("bn2")
        .activation("relu2", Activation::Relu)
        .representation()
        .dense("head", classes)
        .build(rng)
}

pub fn toy_cnn<R: Rng>(input_shape: &[usize], channels: usize, classes: usize, rng: &mut R) -> Result<ModelState> {
    if input_shape.len() != 3 {
        return Err(Error::Shape {
            layer: "conv1".into(),
            expected: vec![1, 0, 0],
            found: input_shape.to_vec(),
        });
    }
    ModelBuilder::new(input_shape.to_vec())
        .conv("conv1", channels, 3)
        .batch_norm("bn1")
        .activation("relu1", Activation::Relu)
        .conv("conv2", channels, 3)
        .batch_norm("bn2")
        .activation("relu2", Activation::Relu)
        .global_avg_pool("pool")
        .representation()
        .dense("head", classes)
        .build(rng)
}
