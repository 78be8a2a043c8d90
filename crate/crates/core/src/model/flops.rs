//! Analytic FLOP counts.
//!
//! One multiply-accumulate counts as 2 FLOPs, a bias add as 1, batch norm as
//! 4 per element, activations and pooling as 1 per input element. A backward
//! pass costs twice its forward pass.

use super::state::{LayerOp, ModelState};

/// Forward-pass FLOPs for a batch of `batch` samples.
pub fn forward_flops(model: &ModelState, batch: usize) -> u64 {
    let mut shape = model.input_shape().to_vec();
    let mut total = 0u64;
    for layer in model.layers() {
        let in_elems: usize = shape.iter().product();
        let out_shape = layer
            .op
            .output_shape(&layer.name, &shape)
            .expect("validated shapes");
        let out_elems: usize = out_shape.iter().product();
        let per_sample = match layer.op {
            LayerOp::Dense { inputs, outputs } => 2 * inputs * outputs + outputs,
            LayerOp::Conv2d {
                in_channels,
                kernel,
                ..
            } => out_elems * (2 * in_channels * kernel * kernel + 1),
            LayerOp::BatchNorm { .. } => 4 * in_elems,
            LayerOp::Activation(_) | LayerOp::GlobalAvgPool => in_elems,
        };
        total += (per_sample * batch) as u64;
        shape = out_shape;
    }
    total
}

/// FLOPs of one training pass (forward plus backward) over `batch_shape`,
/// whose first entry is the batch size.
pub fn flops(model: &ModelState, batch_shape: &[usize]) -> u64 {
    3 * forward_flops(model, batch_shape.first().copied().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::state::ModelBuilder;
    use crate::rng::{stream, Purpose};

    #[test]
    fn dense_hand_count() {
        let m = ModelBuilder::new(vec![2])
            .dense("fc", 3)
            .representation()
            .build(&mut stream(0, 0, 0, Purpose::Init))
            .unwrap();
        assert_eq!(forward_flops(&m, 1), 15);
        assert_eq!(flops(&m, &[1, 2]), 45);
        assert_eq!(flops(&m, &[2, 2]), 2 * flops(&m, &[1, 2]));
    }
}
