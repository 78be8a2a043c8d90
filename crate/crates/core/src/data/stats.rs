use super::Dataset;
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PixelStats {
    /// Relative frequency of pixel values over 256 equal bins spanning `[-1, 1]`.
    pub histogram: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of all pixels.
    pub std: f64,
}

fn bin_of(v: f64) -> usize {
    let b = ((v + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
    (b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

pub fn pixel_stats(dataset: &Dataset) -> Result<PixelStats> {
    let total = dataset.len() * dataset.pixels_per_image();
    if total == 0 {
        return Err(Error::InvalidArgument("pixel statistics of an empty dataset".into()));
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let mut sum = 0.0;
    for s in &dataset.samples {
        for &p in &s.image {
            counts[bin_of(p as f64)] += 1;
            sum += p as f64;
        }
    }
    let mean = sum / total as f64;
    let var = dataset
        .samples
        .iter()
        .flat_map(|s| s.image.iter())
        .map(|&p| (p as f64 - mean).powi(2))
        .sum::<f64>()
        / total as f64;
    Ok(PixelStats {
        histogram: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        mean,
        std: var.sqrt(),
    })
}

/// Population standard deviation of the per-client pixel means.
pub fn cross_client_std(clients: &[Dataset]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let means = clients
        .iter()
        .map(|c| pixel_stats(c).map(|s| s.mean))
        .collect::<Result<Vec<_>>>()?;
    let m = means.iter().sum::<f64>() / means.len() as f64;
    Ok((means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn constant(v: f32, n: usize) -> Dataset {
        Dataset::new(2, vec![1, 2, 2], (0..n).map(|_| Sample::real(vec![v; 4], 0)).collect()).unwrap()
    }

    #[test]
    fn constant_dataset_has_one_bin() {
        let s = pixel_stats(&constant(0.25, 3)).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.histogram.iter().filter(|v| **v > 0.0).count(), 1);
        assert!((s.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_client_std_is_half_gap() {
        let std = cross_client_std(&[constant(-0.5, 2), constant(0.3, 5)]).unwrap();
        assert!((std - 0.4).abs() < 1e-7);
        assert_eq!(cross_client_std(&[constant(0.1, 2), constant(0.1, 2)]).unwrap(), 0.0);
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(pixel_stats(&constant(0.0, 0)).is_err());
    }

    #[test]
    fn extreme_values_land_in_edge_bins() {
        assert_eq!(bin_of(-1.0), 0);
        assert_eq!(bin_of(1.0), HISTOGRAM_BINS - 1);
    }
}
