//! The simulation engine: weighted aggregation, the round loop, evaluation,
//! convergence detection and cost accounting.

mod aggregate;
mod eval;
mod ledger;
mod report;
mod run;

pub use aggregate::{aggregate_weighted, receive, AggregationWeights, ParamMask};
pub(crate) use aggregate::weighted_sum_into;
pub use eval::{argmax, detect_convergence, evaluate_global, evaluate_personalized, ConvergencePolicy};
pub use ledger::{
    CommEvent, CommTotals, CostLedger, Direction, FlopEvent, Phase, BYTES_PER_SCALAR,
};
pub use report::{
    parse_csv, primary_series, records_to_csv, Manifest, Metric, RoundRecord, RunReport,
    CSV_HEADER, REPORT_SCHEMA,
};
pub use run::{
    epoch_batches, run_federation, run_federation_with, simulate_ledger, AggregateContext,
    AggregateOutcome, ClientState, LocalContext, LocalOutcome, NoObserver, PrepareContext,
    PrepareOutcome, RoundObserver, RunInputs, RunOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdamHyper, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Global,
    Personalized,
    Both,
}

impl EvalMode {
    pub fn wants_global(self) -> bool {
        matches!(self, EvalMode::Global | EvalMode::Both)
    }

    pub fn wants_personalized(self) -> bool {
        matches!(self, EvalMode::Personalized | EvalMode::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_mode: EvalMode,
    pub model: ModelSpec,
    pub optimizer: AdamHyper,
    pub convergence: ConvergencePolicy,
}

impl FederationConfig {
    /// Five local epochs, batches of 64, Adam defaults, both evaluations.
    pub fn new(clients: usize, rounds: usize, seed: u64) -> Self {
        FederationConfig {
            clients,
            rounds,
            local_epochs: 5,
            batch_size: 64,
            seed,
            eval_mode: EvalMode::Both,
            model: ModelSpec::default(),
            optimizer: AdamHyper::default(),
            convergence: ConvergencePolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("federation.clients", self.clients),
            ("federation.rounds", self.rounds),
            ("federation.local_epochs", self.local_epochs),
            ("federation.batch_size", self.batch_size),
            ("convergence.window", self.convergence.window),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        Ok(())
    }
}
