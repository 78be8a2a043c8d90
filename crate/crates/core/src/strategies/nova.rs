use serde::{Deserialize, Serialize};

use super::supervised::{train_flops, train_supervised, SupervisedTerms};
use super::{Strategy, StrategyKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_weighted, weighted_sum_into, AggregateContext, AggregateOutcome, ClientState,
    LocalContext, LocalOutcome, ParamMask, Phase, PrepareContext, PrepareOutcome,
};
use crate::model::{Footprint, ModelState, Role};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedNovaParams {
    /// Server momentum.
    pub rho: f64,
}

impl Default for FedNovaParams {
    fn default() -> Self {
        FedNovaParams { rho: 0.9 }
    }
}

/// Normalized update direction `sum_k p_k delta_k / tau_k` and the effective
/// step count `sum_k p_k tau_k`.
pub fn nova_direction(deltas: &[&[f64]], taus: &[u64], weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    if deltas.len() != taus.len() || deltas.len() != weights.len() || deltas.is_empty() {
        return Err(Error::InvalidArgument("deltas, step counts and weights differ in length".into()));
    }
    if let Some(k) = taus.iter().position(|&t| t == 0) {
        return Err(Error::InvalidArgument(format!("client {k} took no local steps")));
    }
    let n = deltas[0].len();
    if deltas.iter().any(|d| d.len() != n) {
        return Err(Error::InvalidArgument("deltas differ in length".into()));
    }
    let coeffs: Vec<f64> = weights.iter().zip(taus).map(|(p, &t)| p / t as f64).collect();
    let mut d = vec![0.0; n];
    weighted_sum_into(deltas, &coeffs, &mut d);
    let tau_eff = weights.iter().zip(taus).map(|(p, &t)| p * t as f64).sum();
    Ok((d, tau_eff))
}

/// Clients train normally; the server rescales each client's update by its
/// number of local steps and applies the result through a momentum buffer.
/// Batch-norm statistics are plainly averaged.
pub struct FedNova {
    params: FedNovaParams,
    momentum: Vec<Vec<f64>>,
}

impl FedNova {
    pub fn new(params: FedNovaParams) -> Self {
        FedNova {
            params,
            momentum: Vec::new(),
        }
    }
}

impl Strategy for FedNova {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedNova
    }

    fn setup_scalars(&self) -> u64 {
        1
    }

    fn upload_scalars(&self, _fp: &Footprint) -> u64 {
        // the client's local step count
        1
    }

    fn prepare(&mut self, _ctx: &PrepareContext, _clients: &mut [Dataset]) -> Result<PrepareOutcome> {
        Ok(PrepareOutcome {
            deviations: vec![
                "FedNova rho is applied as server momentum on the normalized update".into(),
            ],
            ..Default::default()
        })
    }

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome> {
        let s = train_supervised(ctx, state, data, ctx.fed.local_epochs, &SupervisedTerms::default())?;
        Ok(LocalOutcome {
            flops: vec![(Phase::Train, train_flops(&state.model, s.samples, 1))],
        })
    }

    fn aggregate(&mut self, ctx: &AggregateContext, clients: &[ClientState]) -> Result<AggregateOutcome> {
        let models: Vec<ModelState> = clients.iter().map(|c| c.model.clone()).collect();
        let mut out = aggregate_weighted(&models, ctx.weights, &ParamMask::shared())?;
        let taus: Vec<u64> = clients.iter().map(|c| c.steps).collect();
        let trainable: Vec<usize> = ctx
            .global
            .params()
            .enumerate()
            .filter(|(_, (_, p))| p.role == Role::Trainable)
            .map(|(i, _)| i)
            .collect();
        if self.momentum.is_empty() {
            self.momentum = ctx
                .global
                .trainable()
                .map(|p| vec![0.0; p.values.len()])
                .collect();
        }
        let global_params: Vec<&[f64]> = ctx.global.params().map(|(_, p)| p.values.as_slice()).collect();
        let client_params: Vec<Vec<&[f64]>> = models
            .iter()
            .map(|m| m.params().map(|(_, p)| p.values.as_slice()).collect())
            .collect();
        let mut new_values = Vec::with_capacity(trainable.len());
        for (slot, &pi) in trainable.iter().enumerate() {
            let base = global_params[pi];
            let deltas: Vec<Vec<f64>> = client_params
                .iter()
                .map(|w| base.iter().zip(w[pi]).map(|(g, x)| g - x).collect())
                .collect();
            let refs: Vec<&[f64]> = deltas.iter().map(Vec::as_slice).collect();
            let (d, tau_eff) = nova_direction(&refs, &taus, ctx.weights.as_slice())?;
            let m = &mut self.momentum[slot];
            for (mi, di) in m.iter_mut().zip(&d) {
                *mi = self.params.rho * *mi + tau_eff * di;
            }
            new_values.push(base.iter().zip(m.iter()).map(|(g, mi)| g - mi).collect::<Vec<f64>>());
        }
        let mut fresh = new_values.into_iter();
        for (_, p) in out.params_mut().filter(|(_, p)| p.role == Role::Trainable) {
            p.values = fresh.next().expect("one value set per trainable tensor");
        }
        Ok(AggregateOutcome::model(out))
    }
}
