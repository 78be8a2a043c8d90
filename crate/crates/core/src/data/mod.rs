//! Datasets, synthetic generation, non-IID partitioning and pixel statistics.

mod fds;
mod partition;
mod shift;
mod stats;
mod synth;

pub use fds::{read_fds, read_fds_file, write_fds, write_fds_file};
pub use partition::{
    canonical_order, partition_dirichlet, partition_kfold, partition_quantity, KFoldSplit,
    PartitionMethod, PartitionPlan, QuantitySplit,
};
pub use shift::{apply_feature_shift, ShiftSpec};
pub use stats::{cross_client_std, pixel_stats, PixelStats};
pub use synth::{gen_synthetic, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Pixels in `[-1, 1]`, row-major over the dataset's image shape.
    pub image: Vec<f32>,
    pub label: usize,
    pub provenance: Provenance,
    /// Soft label replacing the one-hot target during training, if any.
    pub soft_label: Option<Vec<f64>>,
}

impl Sample {
    pub fn real(image: Vec<f32>, label: usize) -> Self {
        Sample {
            image,
            label,
            provenance: Provenance::Real,
            soft_label: None,
        }
    }

    pub fn target(&self, classes: usize) -> Vec<f64> {
        match &self.soft_label {
            Some(s) => s.clone(),
            None => {
                let mut y = vec![0.0; classes];
                y[self.label] = 1.0;
                y
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    /// Shape of one image, `[channels, height, width]`.
    pub shape: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_count: usize, shape: Vec<usize>, samples: Vec<Sample>) -> Result<Self> {
        let ds = Dataset {
            class_count,
            shape,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty_like(&self) -> Self {
        Dataset {
            class_count: self.class_count,
            shape: self.shape.clone(),
            samples: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != n {
                return Err(Error::Shape {
                    layer: format!("sample {i}"),
                    expected: self.shape.clone(),
                    found: vec![s.image.len()],
                });
            }
            if s.label >= self.class_count {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} label {} outside [0, {})",
                    s.label, self.class_count
                )));
            }
            if s.image.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has pixels outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Dataset {
            class_count: self.class_count,
            shape: self.shape.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut out = first.empty_like();
        for p in parts {
            if p.shape != first.shape || p.class_count != first.class_count {
                return Err(Error::Schema("datasets differ in shape or classes".into()));
            }
            out.samples.extend(p.samples.iter().cloned());
        }
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn class_present(&self) -> Vec<bool> {
        self.class_counts().into_iter().map(|c| c > 0).collect()
    }

    /// Input tensor `[n, C, H, W]` and target vectors for the given samples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<Vec<f64>>) {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend(s.image.iter().map(|&v| v as f64));
            targets.push(s.target(self.class_count));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        (Tensor::new(shape, data), targets)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}
