use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::supervised::{train_flops, train_supervised, SupervisedTerms};
use super::{Strategy, StrategyKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_weighted, weighted_sum_into, AggregateContext, AggregateOutcome, ClientState,
    LocalContext, LocalOutcome, ParamMask, Phase, PrepareContext, PrepareOutcome,
};
use crate::model::loss::cross_entropy_soft;
use crate::model::{backward, infer, Footprint, ModelState, Role};
use crate::rng::Purpose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticParams {
    /// Decay of the per-layer sensitivity average.
    pub mu: f64,
    pub tau: f64,
    /// Share of local data used for the gradient probe each round.
    pub probe_fraction: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams {
            mu: 0.95,
            tau: 0.5,
            probe_fraction: 0.1,
        }
    }
}

/// Per-layer step multipliers `1 + tau - s_hat`, where `s_hat` is the
/// sensitivity min-max scaled to `[0, 1]` (0.5 everywhere when all layers
/// are equally sensitive).
pub fn elastic_coefficients(sensitivity: &[f64], tau: f64) -> Vec<f64> {
    let lo = sensitivity.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sensitivity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    sensitivity
        .iter()
        .map(|s| {
            let scaled = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
            1.0 + tau - scaled
        })
        .collect()
}

/// Layers whose parameters the loss is most sensitive to move less toward
/// the client average; insensitive layers move further.
pub struct Elastic {
    params: ElasticParams,
}

impl Elastic {
    pub fn new(params: ElasticParams) -> Self {
        Elastic { params }
    }

    fn probe(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<u64> {
        let n = data.len();
        let m = ((self.params.probe_fraction * n as f64).ceil() as usize).clamp(n.min(2), n);
        let mut idx = sample(&mut ctx.rng(Purpose::Probe), n, m).into_vec();
        idx.sort_unstable();
        let (x, y) = data.batch(&idx);
        let trace = infer(&state.model, &x)?;
        let (_, g) = cross_entropy_soft(&trace.logits, &y)?;
        let grads = backward(&state.model, &trace, &g)?;
        let names = state.model.trainable_layer_names();
        if state.sensitivity.len() != names.len() {
            return Err(Error::Schema("sensitivity vector does not match trainable layers".into()));
        }
        for (s, name) in state.sensitivity.iter_mut().zip(&names) {
            *s = self.params.mu * *s + (1.0 - self.params.mu) * grads.layer_norm(name);
        }
        Ok(train_flops(&state.model, m, 1))
    }
}

impl Strategy for Elastic {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Elastic
    }

    fn setup_scalars(&self) -> u64 {
        1
    }

    fn upload_scalars(&self, fp: &Footprint) -> u64 {
        fp.trainable_layers
    }

    fn prepare(&mut self, _ctx: &PrepareContext, _clients: &mut [Dataset]) -> Result<PrepareOutcome> {
        Ok(PrepareOutcome {
            deviations: vec![
                "Elastic aggregation uses the reconstructed per-layer rule zeta = 1 + tau - minmax(sensitivity)"
                    .into(),
            ],
            ..Default::default()
        })
    }

    fn init_client(&self, state: &mut ClientState) {
        state.sensitivity = vec![0.0; state.model.trainable_layer_names().len()];
    }

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome> {
        let probe = self.probe(ctx, state, data)?;
        let s = train_supervised(ctx, state, data, ctx.fed.local_epochs, &SupervisedTerms::default())?;
        Ok(LocalOutcome {
            flops: vec![
                (Phase::Probe, probe),
                (Phase::Train, train_flops(&state.model, s.samples, 1)),
            ],
        })
    }

    fn aggregate(&mut self, ctx: &AggregateContext, clients: &[ClientState]) -> Result<AggregateOutcome> {
        let models: Vec<ModelState> = clients.iter().map(|c| c.model.clone()).collect();
        let mut out = aggregate_weighted(&models, ctx.weights, &ParamMask::shared())?;
        let layers = ctx.global.trainable_layer_names();
        let columns: Vec<&[f64]> = clients.iter().map(|c| c.sensitivity.as_slice()).collect();
        if columns.iter().any(|c| c.len() != layers.len()) {
            return Err(Error::Schema("sensitivity vector does not match trainable layers".into()));
        }
        let mut s = vec![0.0; layers.len()];
        weighted_sum_into(&columns, ctx.weights.as_slice(), &mut s);
        let zeta = elastic_coefficients(&s, self.params.tau);
        for (layer, global_layer) in out.layers_mut().iter_mut().zip(ctx.global.layers()) {
            let Some(l) = layers.iter().position(|n| *n == layer.name) else {
                continue;
            };
            if zeta[l] == 1.0 {
                continue;
            }
            for (p, g) in layer.params.iter_mut().zip(&global_layer.params) {
                if p.role != Role::Trainable {
                    continue;
                }
                for (w, w0) in p.values.iter_mut().zip(&g.values) {
                    *w = w0 + zeta[l] * (*w - w0);
                }
            }
        }
        Ok(AggregateOutcome::model(out))
    }
}
