use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation role of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Trainable,
    /// Batch-norm running mean and running variance.
    BnStatistic,
    /// Batch-norm `batches_tracked`; holds a single non-negative integer.
    BnCounter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv,
    BatchNorm,
    Activation,
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride 1, zero padding `kernel / 2` ("same" output size for odd kernels).
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    BatchNorm {
        features: usize,
        momentum: f64,
        eps: f64,
    },
    Activation(Activation),
    GlobalAvgPool,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv2d { .. } => LayerKind::Conv,
            LayerOp::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerOp::Activation(_) => LayerKind::Activation,
            LayerOp::GlobalAvgPool => LayerKind::Pool,
        }
    }

    /// Output shape (without batch axis) for a given input shape.
    pub fn output_shape(&self, name: &str, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            layer: name.to_string(),
            expected,
            found: input.to_vec(),
        };
        match *self {
            LayerOp::Dense { inputs, outputs } => {
                if input.iter().product::<usize>() != inputs {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                ..
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(mismatch(vec![in_channels, 0, 0])),
            },
            LayerOp::BatchNorm { features, .. } => {
                if input.first() != Some(&features) || !(input.len() == 1 || input.len() == 3) {
                    return Err(mismatch(vec![features]));
                }
                Ok(input.to_vec())
            }
            LayerOp::Activation(_) => Ok(input.to_vec()),
            LayerOp::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => Err(mismatch(vec![0, 0, 0])),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn new(name: String, role: Role, shape: Vec<usize>, fill: f64) -> Self {
        let n = shape.iter().product();
        Param {
            name,
            role,
            shape,
            values: vec![fill; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub params: Vec<Param>,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    pub fn has_trainable(&self) -> bool {
        self.params.iter().any(|p| p.role == Role::Trainable)
    }

    fn with_params(name: &str, op: LayerOp) -> Self {
        let p = |suffix: &str, role, shape: Vec<usize>, fill| {
            Param::new(format!("{name}.{suffix}"), role, shape, fill)
        };
        let params = match op {
            LayerOp::Dense { inputs, outputs } => vec![
                p("weight", Role::Trainable, vec![outputs, inputs], 0.0),
                p("bias", Role::Trainable, vec![outputs], 0.0),
            ],
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => vec![
                p(
                    "weight",
                    Role::Trainable,
                    vec![out_channels, in_channels, kernel, kernel],
                    0.0,
                ),
                p("bias", Role::Trainable, vec![out_channels], 0.0),
            ],
            LayerOp::BatchNorm { features, .. } => vec![
                p("gamma", Role::Trainable, vec![features], 1.0),
                p("beta", Role::Trainable, vec![features], 0.0),
                p("running_mean", Role::BnStatistic, vec![features], 0.0),
                p("running_var", Role::BnStatistic, vec![features], 1.0),
                p("batches_tracked", Role::BnCounter, vec![1], 0.0),
            ],
            LayerOp::Activation(_) | LayerOp::GlobalAvgPool => Vec::new(),
        };
        Layer {
            name: name.to_string(),
            op,
            params,
        }
    }

    pub(crate) fn param(&self, suffix: &str) -> &[f64] {
        let full = format!("{}.{}", self.name, suffix);
        &self
            .params
            .iter()
            .find(|p| p.name == full)
            .expect("layer parameter present by construction")
            .values
    }

    pub(crate) fn param_mut(&mut self, suffix: &str) -> &mut Vec<f64> {
        let full = format!("{}.{}", self.name, suffix);
        &mut self
            .params
            .iter_mut()
            .find(|p| p.name == full)
            .expect("layer parameter present by construction")
            .values
    }
}

/// Parameter counts used by the communication ledger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    /// All scalars in the model state, BN statistics and counters included.
    pub total: u64,
    /// Scalars that live in batch-norm layers (affine, statistics, counters).
    pub bn: u64,
    /// Layers carrying at least one trainable tensor.
    pub trainable_layers: u64,
}

/// A named, ordered stack of layers.
///
/// Every mutable accessor bumps an internal generation counter so that a
/// [`ForwardTrace`](super::ForwardTrace) recorded before a mutation is
/// rejected by backward.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub(crate) layers: Vec<Layer>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) representation_layer: usize,
    pub(crate) generation: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && self.representation_layer == other.representation_layer
    }
}

impl ModelState {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Index of the layer whose output is the representation tap.
    pub fn representation_layer(&self) -> usize {
        self.representation_layer
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn params(&self) -> impl Iterator<Item = (&Layer, &Param)> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(move |p| (l, p)))
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params()
            .map(|(_, p)| p)
            .filter(|p| p.role == Role::Trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|p| p.name.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().map(|(_, p)| p).find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .find(|p| p.name == name)
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (LayerKind, &mut Param)> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let kind = l.kind();
                l.params.iter_mut().map(move |p| (kind, p))
            })
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|(_, p)| p.values.len()).sum()
    }

    pub fn footprint(&self) -> Footprint {
        let bn = self
            .params()
            .filter(|(l, _)| l.kind() == LayerKind::BatchNorm)
            .map(|(_, p)| p.values.len() as u64)
            .sum();
        Footprint {
            total: self.param_count() as u64,
            bn,
            trainable_layers: self.layers.iter().filter(|l| l.has_trainable()).count() as u64,
        }
    }

    pub fn trainable_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.has_trainable())
            .map(|l| l.name.clone())
            .collect()
    }

    /// Names, roles and shapes agree with `other`, in the same order.
    pub fn same_schema(&self, other: &ModelState) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.op == b.op
                    && a.params.len() == b.params.len()
                    && a.params
                        .iter()
                        .zip(&b.params)
                        .all(|(p, q)| p.name == q.name && p.role == q.role && p.shape == q.shape)
            })
    }

    pub fn check_schema(&self, other: &ModelState) -> Result<()> {
        if self.same_schema(other) {
            Ok(())
        } else {
            Err(Error::Schema("models do not share a parameter schema".into()))
        }
    }

    /// Batch-norm counters of every BN layer, in layer order.
    pub fn batches_tracked(&self) -> Vec<u64> {
        self.params()
            .filter(|(_, p)| p.role == Role::BnCounter)
            .map(|(_, p)| p.values[0] as u64)
            .collect()
    }

    /// Output shape of every layer for one sample.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l
                    .op
                    .output_shape(&l.name, &shape)
                    .expect("shapes validated at build time");
                shape.clone()
            })
            .collect()
    }

    pub fn output_len(&self) -> usize {
        self.layer_shapes()
            .last()
            .map_or(0, |s| s.iter().product())
    }

    pub fn representation_len(&self) -> usize {
        self.layer_shapes()[self.representation_layer]
            .iter()
            .product()
    }

    /// Squared L2 distance over trainable parameters.
    pub fn trainable_distance_sq(&self, other: &ModelState) -> f64 {
        self.trainable()
            .zip(other.trainable())
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }
}

/// Incrementally builds a [`ModelState`], validating shapes as layers are added.
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    layers: Vec<Layer>,
    representation_layer: Option<usize>,
    error: Option<Error>,
}

impl ModelBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        ModelBuilder {
            shape: input_shape.clone(),
            input_shape,
            layers: Vec::new(),
            representation_layer: None,
            error: None,
        }
    }

    fn push(mut self, name: &str, op: LayerOp) -> Self {
        if self.error.is_some() {
            return self;
        }
        if self.layers.iter().any(|l| l.name == name) {
            self.error = Some(Error::Schema(format!("duplicate layer name `{name}`")));
            return self;
        }
        match op.output_shape(name, &self.shape) {
            Ok(s) => {
                self.shape = s;
                self.layers.push(Layer::with_params(name, op));
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    pub fn dense(self, name: &str, outputs: usize) -> Self {
        let inputs = self.shape.iter().product();
        self.push(name, LayerOp::Dense { inputs, outputs })
    }

    pub fn conv(self, name: &str, out_channels: usize, kernel: usize) -> Self {
        let in_channels = self.shape.first().copied().unwrap_or(0);
        self.push(
            name,
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
        )
    }

    pub fn batch_norm(self, name: &str) -> Self {
        let features = self.shape.first().copied().unwrap_or(0);
        self.push(
            name,
            LayerOp::BatchNorm {
                features,
                momentum: 0.1,
                eps: 1e-5,
            },
        )
    }

    pub fn activation(self, name: &str, act: Activation) -> Self {
        self.push(name, LayerOp::Activation(act))
    }

    pub fn global_avg_pool(self, name: &str) -> Self {
        self.push(name, LayerOp::GlobalAvgPool)
    }

    /// Marks the most recently added layer as the representation tap.
    pub fn representation(mut self) -> Self {
        self.representation_layer = self.layers.len().checked_sub(1);
        self
    }

    /// Finalizes the model with uniform fan-in initialization of dense and
    /// conv weights and biases in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn build<R: Rng>(self, rng: &mut R) -> Result<ModelState> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.layers.is_empty() {
            return Err(Error::Schema("model has no layers".into()));
        }
        let representation_layer = self
            .representation_layer
            .unwrap_or(self.layers.len().saturating_sub(2));
        let mut layers = self.layers;
        for layer in &mut layers {
            let fan_in = match layer.op {
                LayerOp::Dense { inputs, .. } => inputs,
                LayerOp::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut layer.params {
                for v in &mut p.values {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(ModelState {
            layers,
            input_shape: self.input_shape,
            representation_layer,
            generation: 0,
        })
    }
}
