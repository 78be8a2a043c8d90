//! Forward and backward passes over a [`ModelState`].

use super::state::{Activation, Layer, LayerOp, ModelState, Role};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics drive batch norm; running statistics and counters update.
    Train,
    /// Running statistics drive batch norm; the model is not modified.
    Eval,
}

#[derive(Clone, Debug)]
enum Cache {
    Dense { input: Tensor },
    Conv { input: Tensor },
    BatchNorm { x_hat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Activation { input: Tensor },
    Pool { input_shape: Vec<usize> },
}

/// Output of [`forward`] together with everything backward needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// Output of the model's representation layer, `[batch, dim]`.
    pub representation: Tensor,
    caches: Vec<Cache>,
    mode: Mode,
    generation: u64,
}

impl ForwardTrace {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub name: String,
    pub values: Vec<f64>,
}

/// Gradients for every trainable parameter, in model order, plus the
/// gradient with respect to the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<ParamGrad>,
    pub input: Tensor,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Gradients {
            params: model
                .trainable()
                .map(|p| ParamGrad {
                    name: p.name.clone(),
                    values: vec![0.0; p.values.len()],
                })
                .collect(),
            input: Tensor::zeros(vec![0]),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|g| g.name == name)
            .map(|g| g.values.as_slice())
    }

    /// `self += scale * other`, matched by position.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Schema("gradient sets differ in length".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.values.len() != b.values.len() {
                return Err(Error::Schema(format!(
                    "gradient `{}` does not match `{}`",
                    a.name, b.name
                )));
            }
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// L2 norm of the gradients belonging to one layer (by name prefix).
    pub fn layer_norm(&self, layer: &str) -> f64 {
        let prefix = format!("{layer}.");
        self.params
            .iter()
            .filter(|g| g.name.starts_with(&prefix))
            .flat_map(|g| g.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|g| g.values.iter().all(|v| v.is_finite()))
    }
}

fn check_input(model: &ModelState, input: &Tensor) -> Result<()> {
    if input.shape.len() < 2 || input.shape[1..] != model.input_shape[..] {
        let layer = model.layers.first().map_or("input", |l| l.name.as_str());
        let mut expected = vec![input.batch()];
        expected.extend_from_slice(&model.input_shape);
        return Err(Error::Shape {
            layer: layer.to_string(),
            expected,
            found: input.shape.clone(),
        });
    }
    if input.batch() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Runs the model. In [`Mode::Train`] batch-norm layers update their running
/// statistics with momentum and increment `batches_tracked` by one.
pub fn forward(model: &mut ModelState, input: &Tensor, mode: Mode) -> Result<ForwardTrace> {
    let (trace, updates) = run_layers(model, input, mode)?;
    if mode == Mode::Train {
        for (layer, update) in model.layers.iter_mut().zip(updates) {
            if let Some(stats) = update {
                apply_bn_update(layer, stats);
            }
        }
        model.generation += 1;
    }
    Ok(ForwardTrace {
        generation: model.generation,
        ..trace
    })
}

/// Evaluation-mode forward pass that leaves the model untouched.
pub fn infer(model: &ModelState, input: &Tensor) -> Result<ForwardTrace> {
    Ok(run_layers(model, input, Mode::Eval)?.0)
}

/// Batch mean, biased variance and element count per normalized feature.
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

fn apply_bn_update(layer: &mut Layer, stats: BnStats) {
    let LayerOp::BatchNorm { momentum, .. } = layer.op else {
        return;
    };
    let unbias = if stats.count > 1 {
        stats.count as f64 / (stats.count as f64 - 1.0)
    } else {
        1.0
    };
    let rm = layer.param_mut("running_mean");
    for (r, m) in rm.iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    let rv = layer.param_mut("running_var");
    for (r, v) in rv.iter_mut().zip(&stats.var) {
        *r = (1.0 - momentum) * *r + momentum * v * unbias;
    }
    layer.param_mut("batches_tracked")[0] += 1.0;
}

fn run_layers(
    model: &ModelState,
    input: &Tensor,
    mode: Mode,
) -> Result<(ForwardTrace, Vec<Option<BnStats>>)> {
    check_input(model, input)?;
    let repr_at = model.representation_layer;
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut updates = Vec::with_capacity(model.layers.len());
    let mut representation = None;
    for (i, layer) in model.layers.iter().enumerate() {
        let (y, cache, update) = layer_forward(layer, x, mode)?;
        caches.push(cache);
        updates.push(update);
        if i == repr_at {
            let b = y.batch();
            let n = y.item_len();
            representation = Some(Tensor::new(vec![b, n], y.data.clone()));
        }
        x = y;
    }
    let b = x.batch();
    let n = x.item_len();
    let trace = ForwardTrace {
        logits: x.reshaped(vec![b, n]),
        representation: representation.expect("representation layer within model"),
        caches,
        mode,
        generation: model.generation,
    };
    Ok((trace, updates))
}

fn layer_forward(layer: &Layer, x: Tensor, mode: Mode) -> Result<(Tensor, Cache, Option<BnStats>)> {
    match layer.op.clone() {
        LayerOp::Dense { inputs, outputs } => {
            let b = x.batch();
            let input = x.reshaped(vec![b, inputs]);
            let w = layer.param("weight");
            let bias = layer.param("bias");
            let mut out = vec![0.0; b * outputs];
            for s in 0..b {
                let xi = input.row(s);
                for o in 0..outputs {
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    let mut acc = bias[o];
                    for (wv, xv) in wr.iter().zip(xi) {
                        acc += wv * xv;
                    }
                    out[s * outputs + o] = acc;
                }
            }
            Ok((Tensor::new(vec![b, outputs], out), Cache::Dense { input }, None))
        }
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let (b, h, wd) = (x.shape[0], x.shape[2], x.shape[3]);
            let pad = (kernel / 2) as isize;
            let w = layer.param("weight");
            let bias = layer.param("bias");
            let mut out = vec![0.0; b * out_channels * h * wd];
            for s in 0..b {
                for o in 0..out_channels {
                    for i in 0..h {
                        for j in 0..wd {
                            let mut acc = bias[o];
                            for c in 0..in_channels {
                                for ki in 0..kernel {
                                    let ii = i as isize + ki as isize - pad;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kernel {
                                        let jj = j as isize + kj as isize - pad;
                                        if jj < 0 || jj >= wd as isize {
                                            continue;
                                        }
                                        acc += w[((o * in_channels + c) * kernel + ki) * kernel + kj]
                                            * x.data[((s * in_channels + c) * h + ii as usize) * wd
                                                + jj as usize];
                                    }
                                }
                            }
                            out[((s * out_channels + o) * h + i) * wd + j] = acc;
                        }
                    }
                }
            }
            Ok((
                Tensor::new(vec![b, out_channels, h, wd], out),
                Cache::Conv { input: x },
                None,
            ))
        }
        LayerOp::BatchNorm { features, eps, .. } => {
            let b = x.batch();
            let spatial = x.item_len() / features;
            let m = b * spatial;
            let idx = |s: usize, f: usize, p: usize| (s * features + f) * spatial + p;
            let (mean, var) = if mode == Mode::Train {
                let mut mean = vec![0.0; features];
                let mut var = vec![0.0; features];
                for f in 0..features {
                    let mut sum = 0.0;
                    for s in 0..b {
                        for p in 0..spatial {
                            sum += x.data[idx(s, f, p)];
                        }
                    }
                    mean[f] = sum / m as f64;
                    let mut sq = 0.0;
                    for s in 0..b {
                        for p in 0..spatial {
                            let d = x.data[idx(s, f, p)] - mean[f];
                            sq += d * d;
                        }
                    }
                    var[f] = sq / m as f64;
                }
                (mean, var)
            } else {
                (
                    layer.param("running_mean").to_vec(),
                    layer.param("running_var").to_vec(),
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let gamma = layer.param("gamma");
            let beta = layer.param("beta");
            let mut x_hat = vec![0.0; x.data.len()];
            let mut out = vec![0.0; x.data.len()];
            for s in 0..b {
                for f in 0..features {
                    for p in 0..spatial {
                        let k = idx(s, f, p);
                        x_hat[k] = (x.data[k] - mean[f]) * inv_std[f];
                        out[k] = gamma[f] * x_hat[k] + beta[f];
                    }
                }
            }
            Ok((
                Tensor::new(x.shape.clone(), out),
                Cache::BatchNorm {
                    x_hat,
                    inv_std,
                    train: mode == Mode::Train,
                },
                (mode == Mode::Train).then_some(BnStats {
                    mean,
                    var,
                    count: m,
                }),
            ))
        }
        LayerOp::Activation(act) => {
            let data = x
                .data
                .iter()
                .map(|&v| match act {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                    Activation::Silu => v / (1.0 + (-v).exp()),
                })
                .collect();
            let out = Tensor::new(x.shape.clone(), data);
            Ok((out, Cache::Activation { input: x }, None))
        }
        LayerOp::GlobalAvgPool => {
            let (b, c) = (x.shape[0], x.shape[1]);
            let spatial = x.item_len() / c;
            let mut out = vec![0.0; b * c];
            for (k, chunk) in x.data.chunks(spatial).enumerate() {
                out[k] = chunk.iter().sum::<f64>() / spatial as f64;
            }
            Ok((
                Tensor::new(vec![b, c], out),
                Cache::Pool {
                    input_shape: x.shape.clone(),
                },
                None,
            ))
        }
    }
}

/// Backpropagates a gradient on the logits.
pub fn backward(model: &ModelState, trace: &ForwardTrace, logits_grad: &Tensor) -> Result<Gradients> {
    backward_with_representation(model, trace, logits_grad, None)
}

/// Backpropagates gradients on the logits and, optionally, on the
/// representation tap. Batch-norm statistics and counters get no gradient.
pub fn backward_with_representation(
    model: &ModelState,
    trace: &ForwardTrace,
    logits_grad: &Tensor,
    representation_grad: Option<&Tensor>,
) -> Result<Gradients> {
    if trace.generation != model.generation {
        return Err(Error::InvalidTrace(format!(
            "model changed since forward (generation {} vs {})",
            trace.generation, model.generation
        )));
    }
    if trace.caches.len() != model.layers.len() {
        return Err(Error::InvalidTrace("trace does not match model layers".into()));
    }
    if logits_grad.shape != trace.logits.shape {
        return Err(Error::Shape {
            layer: "logits".into(),
            expected: trace.logits.shape.clone(),
            found: logits_grad.shape.clone(),
        });
    }
    if let Some(rg) = representation_grad {
        if rg.shape != trace.representation.shape {
            return Err(Error::Shape {
                layer: model.layers[model.representation_layer].name.clone(),
                expected: trace.representation.shape.clone(),
                found: rg.shape.clone(),
            });
        }
    }

    let shapes = model.layer_shapes();
    let batch = logits_grad.batch();
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.layers.len()];
    let mut grad = logits_grad.clone();
    for i in (0..model.layers.len()).rev() {
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&shapes[i]);
        grad = grad.reshaped(out_shape);
        if i == model.representation_layer {
            if let Some(rg) = representation_grad {
                for (g, r) in grad.data.iter_mut().zip(&rg.data) {
                    *g += r;
                }
            }
        }
        let (din, pgrads) = layer_backward(&model.layers[i], &trace.caches[i], &grad)?;
        per_layer[i] = pgrads;
        grad = din;
    }
    let mut in_shape = vec![batch];
    in_shape.extend_from_slice(&model.input_shape);
    let input = grad.reshaped(in_shape);

    let mut params = Vec::new();
    for (layer, grads) in model.layers.iter().zip(per_layer) {
        let trainable: Vec<_> = layer
            .params
            .iter()
            .filter(|p| p.role == Role::Trainable)
            .collect();
        debug_assert_eq!(trainable.len(), grads.len());
        for (p, g) in trainable.into_iter().zip(grads) {
            params.push(ParamGrad {
                name: p.name.clone(),
                values: g,
            });
        }
    }
    Ok(Gradients { params, input })
}

fn layer_backward(layer: &Layer, cache: &Cache, dout: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
    match (&layer.op, cache) {
        (&LayerOp::Dense { inputs, outputs }, Cache::Dense { input }) => {
            let b = dout.batch();
            let w = layer.param("weight");
            let mut dw = vec![0.0; inputs * outputs];
            let mut db = vec![0.0; outputs];
            let mut dx = vec![0.0; b * inputs];
            for s in 0..b {
                let xi = input.row(s);
                let dxi = &mut dx[s * inputs..(s + 1) * inputs];
                for o in 0..outputs {
                    let g = dout.data[s * outputs + o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let wr = &w[o * inputs..(o + 1) * inputs];
                    let dwr = &mut dw[o * inputs..(o + 1) * inputs];
                    for k in 0..inputs {
                        dwr[k] += g * xi[k];
                        dxi[k] += g * wr[k];
                    }
                }
            }
            Ok((Tensor::new(vec![b, inputs], dx), vec![dw, db]))
        }
        (
            &LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            Cache::Conv { input },
        ) => {
            let (b, h, wd) = (input.shape[0], input.shape[2], input.shape[3]);
            let pad = (kernel / 2) as isize;
            let w = layer.param("weight");
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; out_channels];
            let mut dx = vec![0.0; input.data.len()];
            for s in 0..b {
                for o in 0..out_channels {
                    for i in 0..h {
                        for j in 0..wd {
                            let g = dout.data[((s * out_channels + o) * h + i) * wd + j];
                            db[o] += g;
                            for c in 0..in_channels {
                                for ki in 0..kernel {
                                    let ii = i as isize + ki as isize - pad;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kernel {
                                        let jj = j as isize + kj as isize - pad;
                                        if jj < 0 || jj >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((s * in_channels + c) * h + ii as usize) * wd
                                            + jj as usize;
                                        let wi = ((o * in_channels + c) * kernel + ki) * kernel + kj;
                                        dw[wi] += g * input.data[xi];
                                        dx[xi] += g * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok((Tensor::new(input.shape.clone(), dx), vec![dw, db]))
        }
        (
            &LayerOp::BatchNorm { features, .. },
            Cache::BatchNorm {
                x_hat,
                inv_std,
                train,
            },
        ) => {
            let b = dout.batch();
            let spatial = dout.item_len() / features;
            let m = (b * spatial) as f64;
            let gamma = layer.param("gamma");
            let idx = |s: usize, f: usize, p: usize| (s * features + f) * spatial + p;
            let mut dgamma = vec![0.0; features];
            let mut dbeta = vec![0.0; features];
            for s in 0..b {
                for f in 0..features {
                    for p in 0..spatial {
                        let k = idx(s, f, p);
                        dgamma[f] += dout.data[k] * x_hat[k];
                        dbeta[f] += dout.data[k];
                    }
                }
            }
            let mut dx = vec![0.0; dout.data.len()];
            for s in 0..b {
                for f in 0..features {
                    let scale = gamma[f] * inv_std[f];
                    for p in 0..spatial {
                        let k = idx(s, f, p);
                        dx[k] = if *train {
                            scale / m * (m * dout.data[k] - dbeta[f] - x_hat[k] * dgamma[f])
                        } else {
                            scale * dout.data[k]
                        };
                    }
                }
            }
            Ok((Tensor::new(dout.shape.clone(), dx), vec![dgamma, dbeta]))
        }
        (LayerOp::Activation(act), Cache::Activation { input }) => {
            let dx = input
                .data
                .iter()
                .zip(&dout.data)
                .map(|(&v, &g)| match act {
                    Activation::Relu => {
                        if v > 0.0 {
                            g
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => {
                        let t = v.tanh();
                        g * (1.0 - t * t)
                    }
                    Activation::Silu => {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * (s + v * s * (1.0 - s))
                    }
                })
                .collect();
            Ok((Tensor::new(input.shape.clone(), dx), Vec::new()))
        }
        (LayerOp::GlobalAvgPool, Cache::Pool { input_shape }) => {
            let c = input_shape[1];
            let spatial: usize = input_shape[2..].iter().product();
            let mut dx = vec![0.0; input_shape.iter().product()];
            for (k, chunk) in dx.chunks_mut(spatial).enumerate() {
                let g = dout.data[k] / spatial as f64;
                chunk.iter_mut().for_each(|v| *v = g);
            }
            debug_assert_eq!(dout.data.len(), input_shape[0] * c);
            Ok((Tensor::new(input_shape.clone(), dx), Vec::new()))
        }
        _ => Err(Error::InvalidTrace(format!(
            "cache for layer `{}` has the wrong kind",
            layer.name
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::state::ModelBuilder;
    use crate::rng::{stream, Purpose};

    fn identity_dense() -> ModelState {
        let mut m = ModelBuilder::new(vec![2])
            .dense("fc", 2)
            .representation()
            .build(&mut stream(0, 0, 0, Purpose::Init))
            .unwrap();
        m.param_mut("fc.weight").unwrap().values = vec![1.0, 0.0, 0.0, 1.0];
        m.param_mut("fc.bias").unwrap().values = vec![0.0, 0.0];
        m
    }

    fn bn_mlp() -> ModelState {
        ModelBuilder::new(vec![3])
            .dense("fc1", 4)
            .batch_norm("bn1")
            .activation("act1", Activation::Relu)
            .representation()
            .dense("head", 2)
            .build(&mut stream(1, 0, 0, Purpose::Init))
            .unwrap()
    }

    fn batch() -> Tensor {
        Tensor::new(vec![3, 3], vec![0.1, -0.4, 0.9, 0.5, 0.2, -0.3, -0.7, 0.8, 0.05])
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut m = identity_dense();
        let t = forward(&mut m, &Tensor::new(vec![1, 2], vec![1.0, 0.0]), Mode::Eval).unwrap();
        assert_eq!(t.logits.data, vec![1.0, 0.0]);
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut m = bn_mlp();
        let before = m.clone();
        let a = forward(&mut m, &batch(), Mode::Eval).unwrap();
        let b = forward(&mut m, &batch(), Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(m, before);
        assert_eq!(m.batches_tracked(), vec![0]);
    }

    #[test]
    fn train_forward_counts_batches() {
        let mut m = bn_mlp();
        for _ in 0..7 {
            forward(&mut m, &batch(), Mode::Train).unwrap();
        }
        assert_eq!(m.batches_tracked(), vec![7]);
        assert_ne!(m.param("bn1.running_mean").unwrap().values, vec![0.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut m = bn_mlp();
        let err = forward(&mut m, &Tensor::zeros(vec![2, 5]), Mode::Eval).unwrap_err();
        match err {
            Error::Shape { layer, .. } => assert_eq!(layer, "fc1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let mut m = bn_mlp();
        let t = forward(&mut m, &batch(), Mode::Train).unwrap();
        let g = backward(&m, &t, &Tensor::zeros(t.logits.shape.clone())).unwrap();
        assert!(g.params.iter().all(|p| p.values.iter().all(|v| *v == 0.0)));
        assert_eq!(g.names(), m.trainable_names().iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn stale_trace_rejected() {
        let mut m = bn_mlp();
        let t = forward(&mut m, &batch(), Mode::Train).unwrap();
        m.param_mut("head.bias").unwrap().values[0] += 1.0;
        let err = backward(&m, &t, &Tensor::zeros(t.logits.shape.clone())).unwrap_err();
        assert!(matches!(err, Error::InvalidTrace(_)));
    }
}
