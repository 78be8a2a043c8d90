use super::ddpm::{sample, Ddpm};
use crate::data::{Dataset, Provenance, Sample};
use crate::error::{Error, Result};

/// `(1 - alpha) * y + alpha / k` for `alpha` strictly inside `(0, 1)`.
pub fn smooth_labels(y: &[f64], alpha: f64, k: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("smoothing {alpha} outside (0, 1)")));
    }
    if y.len() != k || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "label of length {} for {k} classes",
            y.len()
        )));
    }
    Ok(y.iter().map(|v| v + alpha * (1.0 / k as f64 - v)).collect())
}

/// Tops `client` up to `target_count` samples with generated images whose
/// labels cycle over the classes the client holds. Synthetic samples get
/// smoothed labels when `alpha > 0`; real samples are left as they are.
pub fn augment_partition(client: &Dataset, ddpm: &Ddpm, target_count: usize, alpha: f64, seed: u64) -> Result<Dataset> {
    if target_count < client.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target_count} is below the client's {} samples",
            client.len()
        )));
    }
    if ddpm.image_shape != client.shape || ddpm.classes != client.class_count {
        return Err(Error::Schema("generator was trained on differently shaped data".into()));
    }
    let deficit = target_count - client.len();
    let mut out = client.clone();
    if deficit == 0 {
        return Ok(out);
    }
    let present: Vec<usize> = client
        .class_present()
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.then_some(c))
        .collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("client holds no labelled samples".into()));
    }
    let per_class: Vec<usize> = (0..present.len())
        .map(|i| deficit / present.len() + usize::from(i < deficit % present.len()))
        .collect();
    let mut pools = Vec::with_capacity(present.len());
    for (&c, &n) in present.iter().zip(&per_class) {
        let images = sample(ddpm, c, n, seed)?;
        if images.len() != n {
            return Err(Error::InvalidArgument(format!(
                "generator produced {} of {n} samples for class {c}",
                images.len()
            )));
        }
        pools.push(images.into_iter());
    }
    for i in 0..deficit {
        let slot = i % present.len();
        let label = present[slot];
        let image = pools[slot].next().expect("pool sized by round-robin share");
        let soft_label = if alpha > 0.0 {
            let mut onehot = vec![0.0; client.class_count];
            onehot[label] = 1.0;
            Some(smooth_labels(&onehot, alpha, client.class_count)?)
        } else {
            None
        };
        out.samples.push(Sample {
            image: image.iter().map(|&v| v as f32).collect(),
            label,
            provenance: Provenance::Synthetic,
            soft_label,
        });
    }
    Ok(out)
}
