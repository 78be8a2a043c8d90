use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelState, Role};

/// Client weights `p_k = n_k / sum_j n_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    p: Vec<f64>,
}

impl AggregationWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("no clients to weight".into()));
        }
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("client {k} has no samples")));
        }
        let total: usize = counts.iter().sum();
        Ok(AggregationWeights {
            p: counts.iter().map(|&n| n as f64 / total as f64).collect(),
        })
    }

    pub fn uniform(clients: usize) -> Result<Self> {
        Self::from_counts(&vec![1; clients])
    }

    /// Explicit weights; they must be positive and sum to one within 1e-12.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {sum}")));
        }
        Ok(AggregationWeights { p })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Which parameters are averaged across clients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub roles: Vec<Role>,
    /// Leave every parameter of every batch-norm layer out, affine ones included.
    pub exclude_bn_layers: bool,
}

impl ParamMask {
    /// Trainable tensors and batch-norm running statistics.
    pub fn shared() -> Self {
        ParamMask {
            roles: vec![Role::Trainable, Role::BnStatistic],
            exclude_bn_layers: false,
        }
    }

    /// Everything outside batch-norm layers.
    pub fn without_bn() -> Self {
        ParamMask {
            roles: vec![Role::Trainable],
            exclude_bn_layers: true,
        }
    }

    pub fn includes(&self, layer: LayerKind, role: Role) -> bool {
        // the counter is a per-client tally and never leaves its client
        role != Role::BnCounter
            && self.roles.contains(&role)
            && !(self.exclude_bn_layers && layer == LayerKind::BatchNorm)
    }
}

/// `sum_k coeffs[k] * columns[k][i]` for every `i`.
///
/// Terms are added in sorted order, so the result does not depend on the
/// order of the clients.
pub(crate) fn weighted_sum_into(columns: &[&[f64]], coeffs: &[f64], out: &mut [f64]) {
    let mut terms = vec![0.0; columns.len()];
    for (i, o) in out.iter_mut().enumerate() {
        for (t, (col, c)) in terms.iter_mut().zip(columns.iter().zip(coeffs)) {
            *t = c * col[i];
        }
        terms.sort_by(f64::total_cmp);
        *o = terms.iter().sum();
    }
}

/// Weighted average of the masked parameters.
///
/// Parameters outside the mask, and batch-norm counters, are taken from
/// `models[0]`; use [`receive`] to hand the result to a client that should
/// keep its own copies of them.
pub fn aggregate_weighted(
    models: &[ModelState],
    weights: &AggregationWeights,
    mask: &ParamMask,
) -> Result<ModelState> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    for m in &models[1..] {
        first.check_schema(m)?;
    }
    let mut out = first.clone();
    for (li, layer) in out.layers_mut().iter_mut().enumerate() {
        let kind = layer.kind();
        for (pi, param) in layer.params.iter_mut().enumerate() {
            if !mask.includes(kind, param.role) {
                continue;
            }
            let columns: Vec<&[f64]> = models
                .iter()
                .map(|m| m.layers[li].params[pi].values.as_slice())
                .collect();
            weighted_sum_into(&columns, weights.as_slice(), &mut param.values);
        }
    }
    Ok(out)
}

/// Copies the masked parameters of `source` into `target`.
pub fn receive(target: &mut ModelState, source: &ModelState, mask: &ParamMask) -> Result<()> {
    target.check_schema(source)?;
    for (tl, sl) in target.layers_mut().iter_mut().zip(&source.layers) {
        let kind = tl.kind();
        for (tp, sp) in tl.params.iter_mut().zip(&sl.params) {
            if mask.includes(kind, tp.role) {
                tp.values.copy_from_slice(&sp.values);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::rng::{stream, Purpose};

    fn scalar(w: f64) -> ModelState {
        let mut m = ModelBuilder::new(vec![1])
            .dense("fc", 1)
            .representation()
            .build(&mut stream(0, 0, 0, Purpose::Init))
            .unwrap();
        m.param_mut("fc.weight").unwrap().values[0] = w;
        m.param_mut("fc.bias").unwrap().values[0] = w;
        m
    }

    #[test]
    fn weighted_mean_by_counts() {
        let w = AggregationWeights::from_counts(&[1, 3]).unwrap();
        let out = aggregate_weighted(&[scalar(0.0), scalar(4.0)], &w, &ParamMask::shared()).unwrap();
        assert_eq!(out.param("fc.weight").unwrap().values, vec![3.0]);
        assert_eq!(out.param("fc.bias").unwrap().values, vec![3.0]);
    }

    #[test]
    fn single_model_is_identity() {
        let m = scalar(0.123456789);
        let w = AggregationWeights::from_counts(&[7]).unwrap();
        assert_eq!(aggregate_weighted(&[m.clone()], &w, &ParamMask::shared()).unwrap(), m);
    }

    #[test]
    fn weight_validation() {
        assert!(AggregationWeights::from_counts(&[]).is_err());
        assert!(AggregationWeights::from_counts(&[3, 0]).is_err());
        assert!(AggregationWeights::new(vec![0.5, 0.4]).is_err());
        let w = AggregationWeights::from_counts(&[1]).unwrap();
        assert!(aggregate_weighted(&[scalar(1.0), scalar(2.0)], &w, &ParamMask::shared()).is_err());
    }

    #[test]
    fn counters_never_mix() {
        assert!(!ParamMask::shared().includes(LayerKind::BatchNorm, Role::BnCounter));
        assert!(!ParamMask::without_bn().includes(LayerKind::BatchNorm, Role::Trainable));
        assert!(ParamMask::without_bn().includes(LayerKind::Dense, Role::Trainable));
    }
}
