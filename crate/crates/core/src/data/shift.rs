use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Per-client appearance change: `x <- clip(contrast * x + brightness + noise)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub brightness_offset: f64,
    pub contrast_scale: f64,
    pub noise_sigma: f64,
}

impl ShiftSpec {
    pub const IDENTITY: ShiftSpec = ShiftSpec {
        brightness_offset: 0.0,
        contrast_scale: 1.0,
        noise_sigma: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Applies `shifts[k]` to `clients[k]`. Labels, counts and shapes are kept.
pub fn apply_feature_shift(clients: &[Dataset], shifts: &[ShiftSpec], seed: u64) -> Result<Vec<Dataset>> {
    if clients.len() != shifts.len() {
        return Err(Error::config(
            "partition.shift",
            format!("{} shift specs for {} clients", shifts.len(), clients.len()),
        ));
    }
    let mut out = Vec::with_capacity(clients.len());
    for (k, (client, spec)) in clients.iter().zip(shifts).enumerate() {
        if spec.is_identity() {
            out.push(client.clone());
            continue;
        }
        if spec.noise_sigma < 0.0 {
            return Err(Error::config("partition.shift.noise", "must be non-negative"));
        }
        let mut rng = stream(seed, k as u64, 0, Purpose::Shift);
        let mut shifted = client.clone();
        for s in &mut shifted.samples {
            for px in &mut s.image {
                let noise = if spec.noise_sigma > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_sigma * n
                } else {
                    0.0
                };
                let v = spec.contrast_scale * *px as f64 + spec.brightness_offset + noise;
                *px = v.clamp(-1.0, 1.0) as f32;
            }
        }
        out.push(shifted);
    }
    Ok(out)
}
