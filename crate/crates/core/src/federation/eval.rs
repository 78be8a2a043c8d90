use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{infer, ModelState};

const EVAL_CHUNK: usize = 256;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of `model` on `test`, with batch norm in eval mode.
pub fn evaluate_global(model: &ModelState, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = test.batch(chunk);
        let trace = infer(model, &x)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(r, &i)| argmax(trace.logits.row(*r)) == test.samples[i].label)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Unweighted mean of per-client accuracies. `tests` holds either one shared
/// test set or one per model.
pub fn evaluate_personalized(models: &[&ModelState], tests: &[&Dataset]) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no client models".into()));
    }
    if tests.len() != 1 && tests.len() != models.len() {
        return Err(Error::InvalidArgument(format!(
            "{} test sets for {} models",
            tests.len(),
            models.len()
        )));
    }
    let mut sum = 0.0;
    for (k, m) in models.iter().enumerate() {
        let t = if tests.len() == 1 { tests[0] } else { tests[k] };
        sum += evaluate_global(m, t)?;
    }
    Ok(sum / models.len() as f64)
}

/// Plateau rule for declaring convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePolicy {
    pub window: usize,
    pub delta: f64,
}

impl Default for ConvergencePolicy {
    fn default() -> Self {
        ConvergencePolicy {
            window: 5,
            delta: 0.001,
        }
    }
}

/// First round (1-based) at which the best accuracy over the next `window`
/// rounds exceeds the trailing `window`-round mean by less than `delta`.
///
/// Only rounds with a full trailing and a full leading window are eligible,
/// so series shorter than `2 * window` never converge.
pub fn detect_convergence(series: &[f64], policy: &ConvergencePolicy) -> Option<usize> {
    let w = policy.window.max(1);
    if series.len() < 2 * w {
        return None;
    }
    (w - 1..=series.len() - w).find_map(|r| {
        let ahead = series[r..r + w].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let trailing = series[r + 1 - w..=r].iter().sum::<f64>() / w as f64;
        (ahead - trailing < policy.delta).then_some(r + 1)
    })
}
