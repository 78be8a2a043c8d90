use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::supervised::{train_flops, train_supervised, SupervisedTerms};
use super::{Strategy, StrategyKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{
    AggregateContext, AggregateOutcome, ClientState, LocalContext, LocalOutcome, Phase,
    PrepareContext, PrepareOutcome,
};
use crate::model::flops::forward_flops;
use crate::model::loss::{cross_entropy_soft, distillation};
use crate::model::{
    adam_step, backward, forward, infer, Activation, AdamHyper, AdamState, ForwardTrace,
    ModelBuilder, ModelState, Mode,
};
use crate::rng::{Purpose, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseParams {
    /// Weight of the ensemble cross-entropy in the generator loss.
    pub lambda1: f64,
    /// Weight of the batch-diversity term in the generator loss.
    pub lambda2: f64,
    pub pretrain_epochs: usize,
    pub generator_steps: usize,
    pub distill_steps: usize,
    pub batch: usize,
    pub noise_dim: usize,
    pub generator_hidden: usize,
    pub kd_temperature: f64,
}

impl Default for DenseParams {
    fn default() -> Self {
        DenseParams {
            lambda1: 1.0,
            lambda2: 0.5,
            pretrain_epochs: 250,
            generator_steps: 200,
            distill_steps: 200,
            batch: 64,
            noise_dim: 16,
            generator_hidden: 64,
            kd_temperature: 1.0,
        }
    }
}

/// Mean of the clients' logits, with each client model in eval mode.
pub fn ensemble_logits(models: &[&ModelState], x: &Tensor) -> Result<Tensor> {
    Ok(ensemble(models, x)?.0)
}

fn ensemble(models: &[&ModelState], x: &Tensor) -> Result<(Tensor, Vec<ForwardTrace>)> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let traces = models
        .iter()
        .map(|m| infer(m, x))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Tensor::zeros(traces[0].logits.shape.clone());
    let k = traces.len() as f64;
    for i in 0..mean.data.len() {
        // each element is summed in model order, which the caller fixes
        mean.data[i] = traces.iter().map(|t| t.logits.data[i]).sum::<f64>() / k;
    }
    Ok((mean, traces))
}

/// Mean pairwise L2 distance between the rows of `x`, with its gradient.
pub fn diversity(x: &Tensor) -> (f64, Tensor) {
    let b = x.batch();
    let mut grad = Tensor::zeros(x.shape.clone());
    if b < 2 {
        return (0.0, grad);
    }
    let pairs = (b * (b - 1) / 2) as f64;
    let mut total = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            let diff: Vec<f64> = x.row(i).iter().zip(x.row(j)).map(|(a, c)| a - c).collect();
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += d;
            if d > 0.0 {
                for (k, v) in diff.iter().enumerate() {
                    grad.row_mut(i)[k] += v / d / pairs;
                    grad.row_mut(j)[k] -= v / d / pairs;
                }
            }
        }
    }
    (total / pairs, grad)
}

/// One-shot federation: clients pretrain once and upload; the server fits a
/// conditional generator against the client ensemble and distills the
/// ensemble into a fresh global model on generated inputs.
pub struct Dense {
    params: DenseParams,
}

impl Dense {
    pub fn new(params: DenseParams) -> Self {
        Dense { params }
    }

    fn generator_input(&self, rng: &mut StreamRng, classes: usize) -> (Tensor, Vec<Vec<f64>>) {
        let b = self.params.batch;
        let width = self.params.noise_dim + classes;
        let mut data = Vec::with_capacity(b * width);
        let mut targets = Vec::with_capacity(b);
        for _ in 0..b {
            for _ in 0..self.params.noise_dim {
                data.push(StandardNormal.sample(rng));
            }
            let label = rng.random_range(0..classes);
            let mut onehot = vec![0.0; classes];
            onehot[label] = 1.0;
            data.extend_from_slice(&onehot);
            targets.push(onehot);
        }
        (Tensor::new(vec![b, width], data), targets)
    }
}

fn as_images(x: &Tensor, shape: &[usize]) -> Tensor {
    let mut s = vec![x.batch()];
    s.extend_from_slice(shape);
    x.clone().reshaped(s)
}

impl Strategy for Dense {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Dense
    }

    fn downloads(&self) -> bool {
        false
    }

    fn effective_rounds(&self, _configured: usize) -> usize {
        1
    }

    fn prepare(&mut self, _ctx: &PrepareContext, _clients: &mut [Dataset]) -> Result<PrepareOutcome> {
        Ok(PrepareOutcome {
            deviations: vec![
                "DENSE generator loss is lambda1 * ensemble cross-entropy minus lambda2 * mean pairwise L2 distance".into(),
                format!(
                    "DENSE clients pretrain for {} epochs; generator and student train in sequence",
                    self.params.pretrain_epochs
                ),
            ],
            ..Default::default()
        })
    }

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome> {
        let s = train_supervised(ctx, state, data, self.params.pretrain_epochs, &SupervisedTerms::default())?;
        Ok(LocalOutcome {
            flops: vec![(Phase::Pretrain, train_flops(&state.model, s.samples, 1))],
        })
    }

    fn aggregate(&mut self, ctx: &AggregateContext, clients: &[ClientState]) -> Result<AggregateOutcome> {
        let teachers: Vec<&ModelState> = clients.iter().map(|c| &c.model).collect();
        let classes = ctx.global.output_len();
        let image_shape = ctx.global.input_shape().to_vec();
        let pixels: usize = image_shape.iter().product();
        let p = self.params;
        let mut gen_rng = ctx.rng(Purpose::Generator);
        let mut generator = ModelBuilder::new(vec![p.noise_dim + classes])
            .dense("gen1", p.generator_hidden)
            .activation("gen_relu", Activation::Relu)
            .representation()
            .dense("gen2", pixels)
            .activation("gen_tanh", Activation::Tanh)
            .build(&mut gen_rng)?;
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..ctx.fed.optimizer
        };
        let mut gen_flops = 0u64;
        let mut adam = AdamState::new();
        for step in 0..p.generator_steps {
            let (z, y) = self.generator_input(&mut gen_rng, classes);
            let trace = forward(&mut generator, &z, Mode::Train)?;
            let x = as_images(&trace.logits, &image_shape);
            let (ens, traces) = ensemble(&teachers, &x)?;
            let (ce, g_ens) = cross_entropy_soft(&ens, &y)?;
            let (div, g_div) = diversity(&trace.logits);
            let loss = p.lambda1 * ce - p.lambda2 * div;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("generator loss at step {step}")));
            }
            let mut g_x = Tensor::zeros(trace.logits.shape.clone());
            let share = p.lambda1 / teachers.len() as f64;
            for (m, t) in teachers.iter().zip(&traces) {
                let gi = backward(m, t, &g_ens)?;
                for (a, b) in g_x.data.iter_mut().zip(&gi.input.data) {
                    *a += share * b;
                }
                gen_flops += 3 * forward_flops(m, p.batch);
            }
            for (a, b) in g_x.data.iter_mut().zip(&g_div.data) {
                *a -= p.lambda2 * b;
            }
            let grads = backward(&generator, &trace, &g_x)?;
            adam_step(&mut generator, &grads, &mut adam, &hyper)?;
            gen_flops += 3 * forward_flops(&generator, p.batch);
        }

        let mut student = ctx.global.clone();
        let mut adam = AdamState::new();
        let mut rng = ctx.rng(Purpose::Distill);
        let mut distill_flops = 0u64;
        for step in 0..p.distill_steps {
            let (z, _) = self.generator_input(&mut rng, classes);
            let x = as_images(&infer(&generator, &z)?.logits, &image_shape);
            let ens = ensemble_logits(&teachers, &x)?;
            let trace = forward(&mut student, &x, Mode::Train)?;
            let (loss, g) = distillation(&trace.logits, &ens, p.kd_temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("distillation loss at step {step}")));
            }
            let grads = backward(&student, &trace, &g)?;
            adam_step(&mut student, &grads, &mut adam, &ctx.fed.optimizer)?;
            distill_flops += forward_flops(&generator, p.batch)
                + teachers.iter().map(|m| forward_flops(m, p.batch)).sum::<u64>()
                + 3 * forward_flops(&student, p.batch);
        }
        Ok(AggregateOutcome {
            global: student,
            flops: vec![(Phase::Generator, gen_flops), (Phase::Distill, distill_flops)],
        })
    }
}
