//! The benchmarked federated algorithms, each a set of hooks the round loop
//! calls: client preparation, local update, upload accounting and server
//! aggregation.

mod dense;
mod elastic;
mod local;
mod nova;
mod ours;
mod prr;
mod supervised;

pub use dense::{diversity, ensemble_logits, Dense, DenseParams};
pub use elastic::{elastic_coefficients, Elastic, ElasticParams};
pub use local::{Contrast, LocalObjective};
pub use nova::{nova_direction, FedNova, FedNovaParams};
pub use ours::{Ours, OursParams};
pub use prr::{select_phase, Prr, PrrParams, PrrPhase};
pub use supervised::{FedProxParams, FedRsParams, MoonParams, Supervised, SupervisedTerms};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_weighted, AggregateContext, AggregateOutcome, ClientState, LocalContext,
    LocalOutcome, ParamMask, PrepareContext, PrepareOutcome,
};
use crate::model::{Footprint, ModelState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    Moon,
    FedNova,
    FedRs,
    Elastic,
    FedBn,
    Prr,
    Dense,
    Ours,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::Moon,
        StrategyKind::FedNova,
        StrategyKind::FedRs,
        StrategyKind::Elastic,
        StrategyKind::FedBn,
        StrategyKind::Prr,
        StrategyKind::Dense,
        StrategyKind::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::Moon => "moon",
            StrategyKind::FedNova => "fednova",
            StrategyKind::FedRs => "fedrs",
            StrategyKind::Elastic => "elastic",
            StrategyKind::FedBn => "fedbn",
            StrategyKind::Prr => "prr",
            StrategyKind::Dense => "dense",
            StrategyKind::Ours => "ours",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::config("strategies", format!("unknown strategy `{s}`")))
    }
}

/// A strategy choice with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum StrategyConfig {
    FedAvg,
    FedProx(FedProxParams),
    Moon(MoonParams),
    FedNova(FedNovaParams),
    FedRs(FedRsParams),
    Elastic(ElasticParams),
    FedBn,
    Prr(PrrParams),
    Dense(DenseParams),
    Ours(OursParams),
}

impl StrategyConfig {
    pub fn default_for(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::FedAvg => StrategyConfig::FedAvg,
            StrategyKind::FedProx => StrategyConfig::FedProx(Default::default()),
            StrategyKind::Moon => StrategyConfig::Moon(Default::default()),
            StrategyKind::FedNova => StrategyConfig::FedNova(Default::default()),
            StrategyKind::FedRs => StrategyConfig::FedRs(Default::default()),
            StrategyKind::Elastic => StrategyConfig::Elastic(Default::default()),
            StrategyKind::FedBn => StrategyConfig::FedBn,
            StrategyKind::Prr => StrategyConfig::Prr(Default::default()),
            StrategyKind::Dense => StrategyConfig::Dense(Default::default()),
            StrategyKind::Ours => StrategyConfig::Ours(Default::default()),
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            StrategyConfig::FedAvg => StrategyKind::FedAvg,
            StrategyConfig::FedProx(_) => StrategyKind::FedProx,
            StrategyConfig::Moon(_) => StrategyKind::Moon,
            StrategyConfig::FedNova(_) => StrategyKind::FedNova,
            StrategyConfig::FedRs(_) => StrategyKind::FedRs,
            StrategyConfig::Elastic(_) => StrategyKind::Elastic,
            StrategyConfig::FedBn => StrategyKind::FedBn,
            StrategyConfig::Prr(_) => StrategyKind::Prr,
            StrategyConfig::Dense(_) => StrategyKind::Dense,
            StrategyConfig::Ours(_) => StrategyKind::Ours,
        }
    }

    /// Checks hyperparameter ranges; errors name the offending config key.
    pub fn validate(&self) -> Result<()> {
        let key = |p: &str| format!("strategy.{}.{p}", self.kind().name());
        let nonneg = |p: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key(p), format!("{v} must be a non-negative number")))
            }
        };
        let positive = |p: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key(p), format!("{v} must be positive")))
            }
        };
        let unit = |p: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key(p), format!("{v} must lie in [0, 1]")))
            }
        };
        match self {
            StrategyConfig::FedAvg | StrategyConfig::FedBn => Ok(()),
            StrategyConfig::FedProx(p) => nonneg("mu", p.mu),
            StrategyConfig::Moon(p) => {
                nonneg("mu", p.mu)?;
                positive("tau", p.tau)
            }
            StrategyConfig::FedNova(p) => unit("rho", p.rho),
            StrategyConfig::FedRs(p) => unit("alpha", p.alpha),
            StrategyConfig::Elastic(p) => {
                unit("mu", p.mu)?;
                nonneg("tau", p.tau)?;
                positive("probe_fraction", p.probe_fraction)?;
                unit("probe_fraction", p.probe_fraction)
            }
            StrategyConfig::Prr(p) => {
                positive("kd_temperature", p.kd_temperature)?;
                if p.alpha1 > p.alpha2 {
                    return Err(Error::config(key("alpha1"), "must not exceed alpha2"));
                }
                nonneg("alpha1", p.alpha1)
            }
            StrategyConfig::Dense(p) => {
                nonneg("lambda1", p.lambda1)?;
                nonneg("lambda2", p.lambda2)?;
                positive("kd_temperature", p.kd_temperature)?;
                if p.pretrain_epochs == 0 {
                    return Err(Error::config(key("pretrain_epochs"), "must be at least 1"));
                }
                if p.batch < 2 {
                    return Err(Error::config(key("batch"), "must be at least 2"));
                }
                Ok(())
            }
            StrategyConfig::Ours(p) => {
                if !(p.smoothing_alpha == 0.0 || (p.smoothing_alpha > 0.0 && p.smoothing_alpha < 1.0)) {
                    return Err(Error::config(
                        key("smoothing_alpha"),
                        "must be 0 (disabled) or inside (0, 1)",
                    ));
                }
                p.ddpm.validate().map_err(|e| match e {
                    Error::Config { field, message } => Error::config(key(&field), message),
                    other => other,
                })
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Strategy>> {
        self.validate()?;
        Ok(match self {
            StrategyConfig::FedAvg => Box::new(Supervised::fedavg()),
            StrategyConfig::FedProx(p) => Box::new(Supervised::fedprox(*p)),
            StrategyConfig::Moon(p) => Box::new(Supervised::moon(*p)),
            StrategyConfig::FedRs(p) => Box::new(Supervised::fedrs(*p)),
            StrategyConfig::FedBn => Box::new(Supervised::fedbn()),
            StrategyConfig::FedNova(p) => Box::new(FedNova::new(*p)),
            StrategyConfig::Elastic(p) => Box::new(Elastic::new(*p)),
            StrategyConfig::Prr(p) => Box::new(Prr::new(*p)),
            StrategyConfig::Dense(p) => Box::new(Dense::new(*p)),
            StrategyConfig::Ours(p) => Box::new(Ours::new(p.clone())),
        })
    }
}

/// Hooks the round loop dispatches to. Implementations for different
/// clients may run concurrently, so `local_update` takes `&self` and all
/// per-client state lives in [`ClientState`].
pub trait Strategy: Send + Sync {
    fn kind(&self) -> StrategyKind;

    /// Parameters averaged on the server and sent back to clients.
    fn mask(&self) -> ParamMask {
        ParamMask::shared()
    }

    /// Model scalars per transmission in either direction.
    fn transmitted_params(&self, fp: &Footprint) -> u64 {
        fp.total
    }

    /// Scalars each client receives once before the first round.
    fn setup_scalars(&self) -> u64 {
        0
    }

    /// Scalars each client uploads per round on top of the model.
    fn upload_scalars(&self, _fp: &Footprint) -> u64 {
        0
    }

    fn downloads(&self) -> bool {
        true
    }

    fn effective_rounds(&self, configured: usize) -> usize {
        configured
    }

    /// Whether the personalized metric is the headline one under mixed evaluation.
    fn personalized(&self) -> bool {
        false
    }

    fn has_global_model(&self) -> bool {
        true
    }

    fn model_warning(&self, _model: &ModelState) -> Option<String> {
        None
    }

    fn prepare(&mut self, _ctx: &PrepareContext, _clients: &mut [Dataset]) -> Result<PrepareOutcome> {
        Ok(PrepareOutcome::default())
    }

    fn init_client(&self, _state: &mut ClientState) {}

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome>;

    fn aggregate(&mut self, ctx: &AggregateContext, clients: &[ClientState]) -> Result<AggregateOutcome> {
        let models: Vec<ModelState> = clients.iter().map(|c| c.model.clone()).collect();
        Ok(AggregateOutcome::model(aggregate_weighted(
            &models,
            ctx.weights,
            &self.mask(),
        )?))
    }

    /// The model scored by personalized evaluation.
    fn personal_model<'a>(&self, state: &'a ClientState) -> &'a ModelState {
        state.personal.as_ref().unwrap_or(&state.model)
    }

    /// Extra facts for the run manifest.
    fn details(&self) -> BTreeMap<String, Value> {
        BTreeMap::new()
    }
}
