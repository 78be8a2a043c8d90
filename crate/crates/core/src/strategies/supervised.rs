use serde::{Deserialize, Serialize};

use super::local::{Contrast, LocalObjective};
use super::{Strategy, StrategyKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{epoch_batches, ClientState, LocalContext, LocalOutcome, ParamMask, Phase};
use crate::model::flops::flops;
use crate::model::{adam_step, infer, AdamState, Footprint, ModelState};
use crate::rng::Purpose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedProxParams {
    pub mu: f64,
}

impl Default for FedProxParams {
    fn default() -> Self {
        FedProxParams { mu: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoonParams {
    pub mu: f64,
    pub tau: f64,
}

impl Default for MoonParams {
    fn default() -> Self {
        MoonParams { mu: 1.0, tau: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedRsParams {
    pub alpha: f64,
}

impl Default for FedRsParams {
    fn default() -> Self {
        FedRsParams { alpha: 0.5 }
    }
}

/// Extra loss terms on top of plain cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupervisedTerms {
    pub prox_mu: f64,
    pub restrict_alpha: Option<f64>,
    pub moon: Option<MoonParams>,
}

impl SupervisedTerms {
    fn moon_active(&self) -> bool {
        self.moon.is_some_and(|m| m.mu != 0.0)
    }
}

pub(crate) struct TrainSummary {
    pub samples: usize,
}

/// `epochs` passes of minibatch Adam over `data` with a fresh optimizer.
pub(crate) fn train_supervised(
    ctx: &LocalContext,
    state: &mut ClientState,
    data: &Dataset,
    epochs: usize,
    terms: &SupervisedTerms,
) -> Result<TrainSummary> {
    let mut adam = AdamState::new();
    let mut rng = ctx.rng(Purpose::Shuffle);
    let moon = terms.moon.filter(|_| terms.moon_active());
    let previous = match moon {
        Some(_) => Some(state.previous.take().unwrap_or_else(|| ctx.global.clone())),
        None => None,
    };
    let mut steps = 0;
    let mut samples = 0;
    for _ in 0..epochs {
        for idx in epoch_batches(&mut rng, data.len(), ctx.fed.batch_size) {
            let (x, y) = data.batch(&idx);
            let reps = match (&previous, moon) {
                (Some(prev), Some(_)) => Some((
                    infer(ctx.global, &x)?.representation,
                    infer(prev, &x)?.representation,
                )),
                _ => None,
            };
            let objective = LocalObjective {
                restrict: terms.restrict_alpha.map(|a| (state.present.as_slice(), a)),
                prox: (terms.prox_mu != 0.0).then_some((ctx.global, terms.prox_mu)),
                contrast: match (&reps, moon) {
                    (Some((zg, zp)), Some(m)) => Some(Contrast {
                        z_glob: zg,
                        z_prev: zp,
                        tau: m.tau,
                        mu: m.mu,
                    }),
                    _ => None,
                },
            };
            let (loss, grads) = objective.evaluate(&mut state.model, &x, &y)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("local loss at optimizer step {steps}")));
            }
            adam_step(&mut state.model, &grads, &mut adam, &ctx.fed.optimizer)?;
            steps += 1;
            samples += idx.len();
        }
    }
    if moon.is_some() {
        state.previous = Some(state.model.clone());
    }
    state.steps = steps;
    Ok(TrainSummary { samples })
}

pub(crate) fn train_flops(model: &ModelState, samples: usize, models_per_step: u64) -> u64 {
    let mut shape = vec![samples];
    shape.extend_from_slice(model.input_shape());
    models_per_step * flops(model, &shape)
}

/// Strategies whose client step is plain supervised training with optional
/// loss terms: FedAvg, FedProx, MOON, FedRS and FedBN.
pub struct Supervised {
    kind: StrategyKind,
    terms: SupervisedTerms,
}

impl Supervised {
    pub fn fedavg() -> Self {
        Supervised {
            kind: StrategyKind::FedAvg,
            terms: SupervisedTerms::default(),
        }
    }

    pub fn fedprox(p: FedProxParams) -> Self {
        Supervised {
            kind: StrategyKind::FedProx,
            terms: SupervisedTerms {
                prox_mu: p.mu,
                ..Default::default()
            },
        }
    }

    pub fn moon(p: MoonParams) -> Self {
        Supervised {
            kind: StrategyKind::Moon,
            terms: SupervisedTerms {
                moon: Some(p),
                ..Default::default()
            },
        }
    }

    pub fn fedrs(p: FedRsParams) -> Self {
        Supervised {
            kind: StrategyKind::FedRs,
            terms: SupervisedTerms {
                restrict_alpha: Some(p.alpha),
                ..Default::default()
            },
        }
    }

    pub fn fedbn() -> Self {
        Supervised {
            kind: StrategyKind::FedBn,
            terms: SupervisedTerms::default(),
        }
    }

    fn is_fedbn(&self) -> bool {
        self.kind == StrategyKind::FedBn
    }
}

impl Strategy for Supervised {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn mask(&self) -> ParamMask {
        if self.is_fedbn() {
            ParamMask::without_bn()
        } else {
            ParamMask::shared()
        }
    }

    fn transmitted_params(&self, fp: &Footprint) -> u64 {
        if self.is_fedbn() {
            fp.total - fp.bn
        } else {
            fp.total
        }
    }

    fn setup_scalars(&self) -> u64 {
        // the loss-term weight each client needs before training
        match self.kind {
            StrategyKind::FedProx | StrategyKind::Moon | StrategyKind::FedRs => 1,
            _ => 0,
        }
    }

    fn personalized(&self) -> bool {
        self.is_fedbn()
    }

    fn has_global_model(&self) -> bool {
        !self.is_fedbn()
    }

    fn model_warning(&self, model: &ModelState) -> Option<String> {
        (self.is_fedbn() && model.footprint().bn == 0)
            .then(|| "model has no batch-norm layers; FedBN behaves like FedAvg".to_string())
    }

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome> {
        let summary = train_supervised(ctx, state, data, ctx.fed.local_epochs, &self.terms)?;
        let models = if self.terms.moon_active() { 3 } else { 1 };
        Ok(LocalOutcome {
            flops: vec![(Phase::Train, train_flops(&state.model, summary.samples, models))],
        })
    }
}
