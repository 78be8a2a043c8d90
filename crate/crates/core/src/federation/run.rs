use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde_json::Value;

use super::aggregate::{receive, AggregationWeights};
use super::eval::{detect_convergence, evaluate_global, evaluate_personalized};
use super::ledger::{CommEvent, CostLedger, Direction, FlopEvent, Phase};
use super::report::{primary_series, Manifest, Metric, RoundRecord, RunReport, REPORT_SCHEMA};
use super::{EvalMode, FederationConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Footprint, ModelState};
use crate::rng::{stream, Purpose, StreamRng, SERVER};
use crate::strategies::{Strategy, StrategyConfig};

/// Everything a client keeps between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// The model the server reads and writes (the deputy under PRR).
    pub model: ModelState,
    /// A model the server never overwrites.
    pub personal: Option<ModelState>,
    /// Snapshot of the model at the end of the previous local update.
    pub previous: Option<ModelState>,
    /// Per-trainable-layer gradient sensitivity.
    pub sensitivity: Vec<f64>,
    /// Optimizer steps taken in the latest local update.
    pub steps: u64,
    /// Which classes occur in the client's data.
    pub present: Vec<bool>,
}

impl ClientState {
    pub fn new(id: usize, model: ModelState, data: &Dataset) -> Self {
        ClientState {
            id,
            model,
            personal: None,
            previous: None,
            sensitivity: Vec::new(),
            steps: 0,
            present: data.class_present(),
        }
    }
}

pub struct LocalContext<'a> {
    /// 1-based round index.
    pub round: usize,
    pub client: usize,
    pub fed: &'a FederationConfig,
    /// The global model as downloaded this round.
    pub global: &'a ModelState,
}

impl LocalContext<'_> {
    pub fn rng(&self, purpose: Purpose) -> StreamRng {
        stream(self.fed.seed, self.client as u64, self.round as u64, purpose)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalOutcome {
    pub flops: Vec<(Phase, u64)>,
}

pub struct AggregateContext<'a> {
    pub round: usize,
    pub fed: &'a FederationConfig,
    /// Global model at the start of the round.
    pub global: &'a ModelState,
    pub weights: &'a AggregationWeights,
}

impl AggregateContext<'_> {
    pub fn rng(&self, purpose: Purpose) -> StreamRng {
        stream(self.fed.seed, SERVER, self.round as u64, purpose)
    }
}

#[derive(Clone, Debug)]
pub struct AggregateOutcome {
    pub global: ModelState,
    pub flops: Vec<(Phase, u64)>,
}

impl AggregateOutcome {
    pub fn model(global: ModelState) -> Self {
        AggregateOutcome {
            global,
            flops: Vec::new(),
        }
    }
}

pub struct PrepareContext<'a> {
    pub fed: &'a FederationConfig,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepareOutcome {
    pub flops: u64,
    pub warnings: Vec<String>,
    pub deviations: Vec<String>,
    pub details: BTreeMap<String, Value>,
}

/// Hooks for inspecting a run between phases of each round.
pub trait RoundObserver {
    fn after_download(&mut self, _round: usize, _clients: &[ClientState]) {}
    fn after_local(&mut self, _round: usize, _clients: &[ClientState]) {}
    fn after_aggregate(&mut self, _round: usize, _global: &ModelState) {}
}

pub struct NoObserver;

impl RoundObserver for NoObserver {}

pub struct RunInputs {
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    /// Per-client test sets for personalized evaluation; the shared test
    /// set is used when absent.
    pub client_tests: Option<Vec<Dataset>>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub global: ModelState,
    pub clients: Vec<ClientState>,
    pub ledger: CostLedger,
    /// Mean distance between each client's uploaded trainable parameters
    /// and the round's starting global model, per round.
    pub drift: Vec<f64>,
    /// Client datasets after any strategy preparation.
    pub datasets: Vec<Dataset>,
}

/// Mini-batches for one pass over `n` samples in shuffled order. A trailing
/// batch of a single sample is dropped, since batch norm cannot use it.
pub fn epoch_batches<R: Rng>(rng: &mut R, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch.max(1))
        .filter(|c| c.len() > 1 || n == 1)
        .map(<[usize]>::to_vec)
        .collect()
}

fn ledger_setup(ledger: &mut CostLedger, strategy: &dyn Strategy, clients: usize) {
    let extra = strategy.setup_scalars();
    if extra == 0 {
        return;
    }
    for client in 0..clients {
        ledger.record_comm(CommEvent {
            round: 1,
            client,
            direction: Direction::Down,
            param_count: 0,
            extra_scalars: extra,
        });
    }
}

fn ledger_download(ledger: &mut CostLedger, strategy: &dyn Strategy, fp: &Footprint, round: usize, client: usize) {
    ledger.record_comm(CommEvent {
        round,
        client,
        direction: Direction::Down,
        param_count: strategy.transmitted_params(fp),
        extra_scalars: 0,
    });
}

fn ledger_upload(ledger: &mut CostLedger, strategy: &dyn Strategy, fp: &Footprint, round: usize, client: usize) {
    ledger.record_comm(CommEvent {
        round,
        client,
        direction: Direction::Up,
        param_count: strategy.transmitted_params(fp),
        extra_scalars: strategy.upload_scalars(fp),
    });
}

/// The communication events a run of `config` would record for a model with
/// footprint `fp`, without training anything.
pub fn simulate_ledger(config: &StrategyConfig, fp: &Footprint, rounds: usize, clients: usize) -> Result<CostLedger> {
    let strategy = config.build()?;
    let mut ledger = CostLedger::new();
    ledger_setup(&mut ledger, strategy.as_ref(), clients);
    for round in 1..=strategy.effective_rounds(rounds) {
        for client in 0..clients {
            if strategy.downloads() {
                ledger_download(&mut ledger, strategy.as_ref(), fp, round, client);
            }
        }
        for client in 0..clients {
            ledger_upload(&mut ledger, strategy.as_ref(), fp, round, client);
        }
    }
    Ok(ledger)
}

pub fn run_federation(
    fed: &FederationConfig,
    strategy: &StrategyConfig,
    clients: Vec<Dataset>,
    test: &Dataset,
) -> Result<RunOutcome> {
    let inputs = RunInputs {
        clients,
        test: test.clone(),
        client_tests: None,
    };
    run_federation_with(fed, strategy, inputs, &mut NoObserver)
}

fn check_inputs(fed: &FederationConfig, inputs: &RunInputs) -> Result<()> {
    fed.validate()?;
    if inputs.clients.len() != fed.clients {
        return Err(Error::config(
            "federation.clients",
            format!("configured {} clients but got {} partitions", fed.clients, inputs.clients.len()),
        ));
    }
    if inputs.test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    for (k, c) in inputs.clients.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::InvalidArgument(format!("client {k} has no samples")));
        }
        if c.shape != inputs.test.shape || c.class_count != inputs.test.class_count {
            return Err(Error::Schema(format!("client {k} data does not match the test set")));
        }
    }
    if let Some(t) = &inputs.client_tests {
        if t.len() != inputs.clients.len() || t.iter().any(Dataset::is_empty) {
            return Err(Error::InvalidArgument("need one nonempty test set per client".into()));
        }
    }
    Ok(())
}

pub fn run_federation_with(
    fed: &FederationConfig,
    config: &StrategyConfig,
    inputs: RunInputs,
    observer: &mut dyn RoundObserver,
) -> Result<RunOutcome> {
    check_inputs(fed, &inputs)?;
    let RunInputs {
        mut clients,
        test,
        client_tests,
    } = inputs;
    let mut strategy = config.build()?;
    let classes = test.class_count;
    let mut global = fed
        .model
        .build(&test.shape, classes, &mut stream(fed.seed, SERVER, 0, Purpose::Init))?;
    let fp = global.footprint();
    let mut ledger = CostLedger::new();
    let mut warnings = Vec::new();
    let mut flags = Vec::new();

    let prep = strategy.prepare(&PrepareContext { fed }, &mut clients)?;
    ledger.record_flops(FlopEvent {
        round: 0,
        client: None,
        phase: Phase::Synthesis,
        flops: prep.flops,
    });
    warnings.extend(prep.warnings.iter().cloned());
    if let Some(msg) = strategy.model_warning(&global) {
        warnings.push(msg);
    }

    let sizes: Vec<usize> = clients.iter().map(Dataset::len).collect();
    let weights = AggregationWeights::from_counts(&sizes)?;
    let mut states: Vec<ClientState> = clients
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let mut s = ClientState::new(k, global.clone(), d);
            strategy.init_client(&mut s);
            s
        })
        .collect();

    let has_global = strategy.has_global_model();
    let mode = fed.eval_mode;
    let want_global = mode.wants_global() && has_global;
    let want_pers = mode.wants_personalized() || !has_global;
    if mode.wants_global() && !has_global {
        flags.push("global evaluation unavailable; personalized mean reported instead".into());
    }
    let metric = match mode {
        EvalMode::Personalized => Metric::Personalized,
        EvalMode::Global if has_global => Metric::Global,
        EvalMode::Both if has_global && !strategy.personalized() => Metric::Global,
        _ => Metric::Personalized,
    };
    let personal_tests: Vec<&Dataset> = match &client_tests {
        Some(t) => t.iter().collect(),
        None => vec![&test],
    };

    let rounds = strategy.effective_rounds(fed.rounds);
    if rounds != fed.rounds {
        flags.push(format!("ran {rounds} round(s) instead of the configured {}", fed.rounds));
    }
    ledger_setup(&mut ledger, strategy.as_ref(), fed.clients);
    let mask = strategy.mask();
    let mut records = Vec::with_capacity(rounds);
    let mut drift = Vec::with_capacity(rounds);

    for round in 1..=rounds {
        if strategy.downloads() {
            for s in &mut states {
                ledger_download(&mut ledger, strategy.as_ref(), &fp, round, s.id);
                receive(&mut s.model, &global, &mask).map_err(|e| e.for_client(s.id).in_round(round))?;
            }
        }
        observer.after_download(round, &states);

        let shared: &dyn Strategy = strategy.as_ref();
        let results: Vec<Result<LocalOutcome>> = states
            .par_iter_mut()
            .zip(clients.par_iter())
            .map(|(s, data)| {
                let ctx = LocalContext {
                    round,
                    client: s.id,
                    fed,
                    global: &global,
                };
                shared.local_update(&ctx, s, data)
            })
            .collect();
        for (k, r) in results.into_iter().enumerate() {
            let outcome = r.map_err(|e| e.for_client(k).in_round(round))?;
            for (phase, flops) in outcome.flops {
                ledger.record_flops(FlopEvent {
                    round,
                    client: Some(k),
                    phase,
                    flops,
                });
            }
            ledger_upload(&mut ledger, strategy.as_ref(), &fp, round, k);
        }
        observer.after_local(round, &states);

        let pers_acc = if want_pers {
            let models: Vec<&ModelState> = states.iter().map(|s| strategy.personal_model(s)).collect();
            Some(evaluate_personalized(&models, &personal_tests).map_err(|e| e.in_round(round))?)
        } else {
            None
        };
        let d = states
            .iter()
            .map(|s| s.model.trainable_distance_sq(&global).sqrt())
            .sum::<f64>()
            / states.len() as f64;
        drift.push(d);

        let ctx = AggregateContext {
            round,
            fed,
            global: &global,
            weights: &weights,
        };
        let agg = strategy
            .aggregate(&ctx, &states)
            .map_err(|e| e.in_round(round))?;
        for (phase, flops) in agg.flops {
            ledger.record_flops(FlopEvent {
                round,
                client: None,
                phase,
                flops,
            });
        }
        global = agg.global;
        observer.after_aggregate(round, &global);

        let global_acc = if want_global {
            Some(evaluate_global(&global, &test).map_err(|e| e.in_round(round))?)
        } else {
            None
        };
        let totals = ledger.totals_through(round);
        records.push(RoundRecord {
            round,
            global_acc,
            pers_acc,
            cum_params: totals.transmitted(),
            cum_bytes: totals.bytes(),
            cum_flops: ledger.flops_through(round),
        });
    }

    let convergence_round = detect_convergence(&primary_series(&records, metric), &fed.convergence);
    let mut details = prep.details;
    details.extend(strategy.details());
    let mut deviations = vec![format!(
        "classifier is a {} with {} parameters rather than an ImageNet-pretrained ResNet-50",
        fed.model.name(),
        fp.total
    )];
    let dims: Vec<String> = test.shape.iter().map(usize::to_string).collect();
    deviations.push(format!("images are {} rather than 3x256x256", dims.join("x")));
    deviations.extend(prep.deviations);
    let manifest = Manifest {
        schema: REPORT_SCHEMA.into(),
        strategy: config.kind().name().into(),
        hyperparameters: serde_json::to_value(config)?,
        seed: fed.seed,
        fold: None,
        federation: fed.clone(),
        config: BTreeMap::new(),
        convergence: fed.convergence,
        convergence_round,
        primary_metric: metric,
        effective_rounds: rounds,
        client_sizes: clients.iter().map(Dataset::len).collect(),
        footprint: fp,
        deviations,
        warnings,
        flags,
        details,
    };
    Ok(RunOutcome {
        report: RunReport {
            records,
            convergence_round,
            manifest,
        },
        global,
        clients: states,
        ledger,
        drift,
        datasets: clients,
    })
}
