use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, SERVER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// `[channels, height, width]`.
    pub shape: Vec<usize>,
    /// Amplitude of the class template.
    pub class_signal: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_level: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 2,
            samples_per_class: 60,
            shape: vec![1, 32, 32],
            class_signal: 0.5,
            noise_level: 0.3,
        }
    }
}

const FREQUENCIES: [(f64, f64); 6] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0), (2.0, 0.0), (0.0, 2.0)];

/// Low-frequency template for `class`: a plane cosine wave. Classes come in
/// pairs sharing a frequency with opposite phase.
fn template(spec: &SyntheticSpec, class: usize, phase: f64) -> Vec<f64> {
    let (c, h, w) = (spec.shape[0], spec.shape[1], spec.shape[2]);
    let (fy, fx) = FREQUENCIES[(class / 2) % FREQUENCIES.len()];
    let shift = phase + PI * (class % 2) as f64 + (class / (2 * FREQUENCIES.len())) as f64 * 0.5 * PI;
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let arg = 2.0 * PI * (fy * (i as f64 + 0.5) / h as f64 + fx * (j as f64 + 0.5) / w as f64)
                    + shift
                    + 0.3 * ch as f64;
                out.push(spec.class_signal * arg.cos());
            }
        }
    }
    out
}

/// Class-conditional images: template plus seeded Gaussian pixel noise,
/// clipped to `[-1, 1]`. Samples are interleaved by class.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config("dataset.classes", "need at least two classes"));
    }
    if spec.shape.len() != 3 || spec.shape.iter().any(|d| *d == 0) {
        return Err(Error::config("dataset.shape", "expected CxHxW with positive sizes"));
    }
    if spec.noise_level < 0.0 {
        return Err(Error::config("dataset.noise_level", "must be non-negative"));
    }
    let mut rng = stream(seed, SERVER, 0, Purpose::Synthesize);
    let phase = rng.random_range(0.0..2.0 * PI);
    let templates: Vec<Vec<f64>> = (0..spec.classes).map(|c| template(spec, c, phase)).collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for _ in 0..spec.samples_per_class {
        for (label, t) in templates.iter().enumerate() {
            let image = t
                .iter()
                .map(|&v| {
                    let noise = if spec.noise_level > 0.0 {
                        spec.noise_level * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    (v + noise).clamp(-1.0, 1.0) as f32
                })
                .collect();
            samples.push(Sample::real(image, label));
        }
    }
    Dataset::new(spec.classes, spec.shape.clone(), samples)
}
