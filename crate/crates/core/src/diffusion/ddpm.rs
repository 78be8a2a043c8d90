use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::epoch_batches;
use crate::model::flops::{flops, forward_flops};
use crate::model::loss::mse;
use crate::model::{
    adam_step, backward, forward, infer, Activation, AdamHyper, AdamState, ModelBuilder,
    ModelState, Mode, Role,
};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tensor::Tensor;

const LOSS_PROBE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub hidden: usize,
    /// Width of the sinusoidal step embedding (even).
    pub time_dim: usize,
}

/// A conditional noise predictor, its EMA shadow and the schedule it was
/// trained under. Sampling always uses the shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct Ddpm {
    pub noise_net: ModelState,
    pub ema_net: ModelState,
    pub schedule: DiffusionSchedule,
    pub classes: usize,
    pub image_shape: Vec<usize>,
    pub time_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Noise-prediction MSE of the untrained network on a fixed probe.
    pub initial_loss: f64,
    /// The same probe after training.
    pub final_loss: f64,
    pub steps: u64,
    pub flops: u64,
}

/// Sinusoidal embedding of step `t`: `dim / 2` sines then `dim / 2` cosines
/// with geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
    let sines = (0..half).map(|i| (t as f64 * freq(i)).sin());
    let cosines = (0..half).map(|i| (t as f64 * freq(i)).cos());
    sines.chain(cosines).collect()
}

impl Ddpm {
    pub fn pixels(&self) -> usize {
        self.image_shape.iter().product()
    }

    fn build_net(pixels: usize, classes: usize, config: &DdpmTrainConfig, rng: &mut StreamRng) -> Result<ModelState> {
        ModelBuilder::new(vec![pixels + config.time_dim + classes])
            .dense("in", config.hidden)
            .activation("act1", Activation::Silu)
            .dense("mid", config.hidden)
            .activation("act2", Activation::Silu)
            .representation()
            .dense("out", pixels)
            .build(rng)
    }

    /// Network input rows `[x_t, embed(t), onehot(label)]`.
    fn input(&self, x_t: &[f64], steps: &[usize], labels: &[usize]) -> Tensor {
        let d = self.pixels();
        let width = d + self.time_dim + self.classes;
        let mut data = Vec::with_capacity(steps.len() * width);
        for (i, (&t, &y)) in steps.iter().zip(labels).enumerate() {
            data.extend_from_slice(&x_t[i * d..(i + 1) * d]);
            data.extend(time_embedding(t, self.time_dim));
            data.extend((0..self.classes).map(|c| if c == y { 1.0 } else { 0.0 }));
        }
        Tensor::new(vec![steps.len(), width], data)
    }

    /// Noised inputs and the noise that produced them, for a batch of images.
    fn noised<R: Rng>(&self, x0: &Tensor, rng: &mut R) -> (Vec<f64>, Vec<usize>, Tensor) {
        let b = x0.batch();
        let d = self.pixels();
        let steps: Vec<usize> = (0..b)
            .map(|_| rng.random_range(1..=self.schedule.timesteps()))
            .collect();
        let eps: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(rng)).collect();
        let mut x_t = Vec::with_capacity(b * d);
        for (i, &t) in steps.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..d {
                x_t.push(a * x0.data[i * d + j] + s * eps[i * d + j]);
            }
        }
        (x_t, steps, Tensor::new(vec![b, d], eps))
    }

    pub fn sampling_flops(&self, count: usize) -> u64 {
        self.schedule.timesteps() as u64 * forward_flops(&self.ema_net, count)
    }
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train a generator on an empty dataset".into()));
    }
    Ok(())
}

/// Noise-prediction MSE of `ddpm.noise_net` on up to 256 samples, with step
/// and noise draws fixed by `seed`.
pub fn ddpm_loss(ddpm: &Ddpm, dataset: &Dataset, seed: u64) -> Result<f64> {
    check_dataset(dataset)?;
    let idx: Vec<usize> = (0..dataset.len().min(LOSS_PROBE)).collect();
    let (x0, _) = dataset.batch(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.samples[i].label).collect();
    let mut rng = stream(seed, 1, 0, Purpose::DiffusionTrain);
    let (x_t, steps, eps) = ddpm.noised(&x0, &mut rng);
    let pred = infer(&ddpm.noise_net, &ddpm.input(&x_t, &steps, &labels))?;
    Ok(mse(&pred.logits, &eps)?.0)
}

fn ema_update(ema: &mut ModelState, net: &ModelState, decay: f64) {
    let sources: Vec<&[f64]> = net
        .params()
        .filter(|(_, p)| p.role == Role::Trainable)
        .map(|(_, p)| p.values.as_slice())
        .collect();
    for ((_, e), src) in ema.params_mut().filter(|(_, p)| p.role == Role::Trainable).zip(sources) {
        for (a, b) in e.values.iter_mut().zip(src) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// Fits a label-conditional noise predictor by minimizing the MSE between
/// predicted and true noise at uniformly drawn steps. The EMA shadow is
/// updated after every optimizer step.
pub fn train_ddpm(
    dataset: &Dataset,
    schedule: &DiffusionSchedule,
    config: &DdpmTrainConfig,
    seed: u64,
) -> Result<(Ddpm, TrainStats)> {
    check_dataset(dataset)?;
    if config.time_dim % 2 != 0 || config.batch == 0 || config.hidden == 0 {
        return Err(Error::InvalidArgument("ddpm needs an even time_dim and nonzero batch and width".into()));
    }
    let pixels = dataset.pixels_per_image();
    let net = Ddpm::build_net(
        pixels,
        dataset.class_count,
        config,
        &mut stream(seed, 0, 0, Purpose::Init),
    )?;
    let mut ddpm = Ddpm {
        ema_net: net.clone(),
        noise_net: net,
        schedule: schedule.clone(),
        classes: dataset.class_count,
        image_shape: dataset.shape.clone(),
        time_dim: config.time_dim,
    };
    let initial_loss = ddpm_loss(&ddpm, dataset, seed)?;
    let hyper = AdamHyper {
        lr: config.lr,
        weight_decay: 0.0,
        ..AdamHyper::default()
    };
    let mut adam = AdamState::new();
    let mut rng = stream(seed, 0, 0, Purpose::DiffusionTrain);
    let mut steps = 0u64;
    let mut total_flops = 0u64;
    for _ in 0..config.epochs {
        for idx in epoch_batches(&mut rng, dataset.len(), config.batch) {
            let (x0, _) = dataset.batch(&idx);
            let x0 = x0.reshaped(vec![idx.len(), pixels]);
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.samples[i].label).collect();
            let (x_t, ts, eps) = ddpm.noised(&x0, &mut rng);
            let input = ddpm.input(&x_t, &ts, &labels);
            let trace = forward(&mut ddpm.noise_net, &input, Mode::Train)?;
            let (loss, g) = mse(&trace.logits, &eps)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("diffusion loss at step {steps}")));
            }
            let grads = backward(&ddpm.noise_net, &trace, &g)?;
            adam_step(&mut ddpm.noise_net, &grads, &mut adam, &hyper)?;
            ema_update(&mut ddpm.ema_net, &ddpm.noise_net, config.ema_decay);
            total_flops += flops(&ddpm.noise_net, &input.shape);
            steps += 1;
        }
    }
    let final_loss = ddpm_loss(&ddpm, dataset, seed)?;
    Ok((
        ddpm,
        TrainStats {
            initial_loss,
            final_loss,
            steps,
            flops: total_flops,
        },
    ))
}

/// Ancestral sampling of `count` images of class `label` with the EMA
/// network. Each step uses variance `beta_t`; the last step adds no noise.
/// Outputs are clipped to `[-1, 1]`.
pub fn sample(ddpm: &Ddpm, label: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if label >= ddpm.classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside [0, {})",
            ddpm.classes
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let d = ddpm.pixels();
    let mut rng = stream(seed, label as u64, 0, Purpose::DiffusionSample);
    let mut x: Vec<f64> = (0..count * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = vec![label; count];
    for t in (1..=ddpm.schedule.timesteps()).rev() {
        let steps = vec![t; count];
        let eps = infer(&ddpm.ema_net, &ddpm.input(&x, &steps, &labels))?.logits;
        let beta = ddpm.schedule.beta(t);
        let coef = beta / (1.0 - ddpm.schedule.alpha_bar(t)).sqrt();
        let scale = 1.0 / ddpm.schedule.alpha(t).sqrt();
        for (xi, ei) in x.iter_mut().zip(&eps.data) {
            *xi = scale * (*xi - coef * ei);
        }
        if t > 1 {
            let sigma = beta.sqrt();
            for xi in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi += sigma * z;
            }
        }
    }
    Ok(x
        .chunks(d)
        .map(|c| c.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
        .collect())
}
