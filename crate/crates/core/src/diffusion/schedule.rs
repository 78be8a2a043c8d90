use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear variance schedule with cached `alpha_bar_t = prod_{s<=t} (1 - beta_s)`.
/// Steps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.betas[0]
    }

    pub fn beta_end(&self) -> f64 {
        self.betas[self.betas.len() - 1]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// One noising step: `sqrt(1 - beta) * x_prev + sqrt(beta) * eps`.
pub fn forward_noise_step(x_prev: &Tensor, beta: f64, eps: &Tensor) -> Result<Tensor> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside (0, 1)")));
    }
    combine(x_prev, (1.0 - beta).sqrt(), eps, beta.sqrt())
}

/// Jump straight to step `t`: `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise_closed(x0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

fn combine(x: &Tensor, a: f64, eps: &Tensor, b: f64) -> Result<Tensor> {
    if x.shape != eps.shape {
        return Err(Error::Shape {
            layer: "noise".into(),
            expected: x.shape.clone(),
            found: eps.shape.clone(),
        });
    }
    let data = x.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::new(x.shape.clone(), data))
}

/// Training epochs for a generator on `samples` images of `classes` classes:
/// `round(1e6 * classes / samples)`.
pub fn ddpm_epochs(classes: usize, samples: usize) -> usize {
    if samples == 0 {
        return 0;
    }
    (1e6 * classes as f64 / samples as f64).round() as usize
}
