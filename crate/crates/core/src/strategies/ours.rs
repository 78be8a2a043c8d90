use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::supervised::{train_flops, train_supervised, SupervisedTerms};
use super::{Strategy, StrategyKind};
use crate::data::Dataset;
use crate::diffusion::{augment_partition, train_ddpm, DdpmSettings};
use crate::error::{Error, Result};
use crate::federation::{ClientState, LocalContext, LocalOutcome, Phase, PrepareContext, PrepareOutcome};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OursParams {
    /// Label-smoothing weight for synthetic samples; 0 disables smoothing.
    pub smoothing_alpha: f64,
    /// Samples per client after augmentation; the largest client size when unset.
    pub target_count: Option<usize>,
    /// When false no generator is trained and the run is plain FedAvg.
    pub augment: bool,
    pub ddpm: DdpmSettings,
}

impl Default for OursParams {
    fn default() -> Self {
        OursParams {
            smoothing_alpha: 0.1,
            target_count: None,
            augment: true,
            ddpm: DdpmSettings::default(),
        }
    }
}

/// Per-client diffusion augmentation to a common size, label smoothing on
/// the synthetic samples, then FedAvg.
pub struct Ours {
    params: OursParams,
}

impl Ours {
    pub fn new(params: OursParams) -> Self {
        Ours { params }
    }
}

struct ClientAugment {
    data: Dataset,
    flops: u64,
    detail: serde_json::Value,
    capped: Option<(usize, usize)>,
}

impl Strategy for Ours {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Ours
    }

    fn prepare(&mut self, ctx: &PrepareContext, clients: &mut [Dataset]) -> Result<PrepareOutcome> {
        if !self.params.augment {
            return Ok(PrepareOutcome::default());
        }
        let largest = clients.iter().map(Dataset::len).max().unwrap_or(0);
        let target = self.params.target_count.unwrap_or(largest);
        if target < largest {
            return Err(Error::config(
                "strategy.ours.target_count",
                format!("{target} is below the largest client ({largest} samples)"),
            ));
        }
        let settings = &self.params.ddpm;
        let schedule = settings.schedule()?;
        let alpha = self.params.smoothing_alpha;
        let seed = ctx.fed.seed;
        let results: Vec<Result<ClientAugment>> = clients
            .par_iter()
            .enumerate()
            .map(|(k, data)| {
                let deficit = target - data.len();
                let (rule, used) = settings.epochs_for(data.class_count, data.len());
                if deficit == 0 {
                    return Ok(ClientAugment {
                        data: data.clone(),
                        flops: 0,
                        detail: json!({"client": k, "real": data.len(), "synthetic": 0}),
                        capped: None,
                    });
                }
                let mut seeds = stream(seed, k as u64, 0, Purpose::Augment);
                let (ddpm, stats) = train_ddpm(data, &schedule, &settings.train_config(used), seeds.next_u64())?;
                let augmented = augment_partition(data, &ddpm, target, alpha, seeds.next_u64())?;
                Ok(ClientAugment {
                    data: augmented,
                    flops: stats.flops + ddpm.sampling_flops(deficit),
                    detail: json!({
                        "client": k,
                        "real": data.len(),
                        "synthetic": deficit,
                        "ddpm_epochs_rule": rule,
                        "ddpm_epochs_used": used,
                        "ddpm_loss_initial": stats.initial_loss,
                        "ddpm_loss_final": stats.final_loss,
                    }),
                    capped: (used < rule).then_some((rule, used)),
                })
            })
            .collect();
        let mut out = PrepareOutcome::default();
        let mut details = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            let a = r.map_err(|e| e.for_client(k))?;
            clients[k] = a.data;
            out.flops += a.flops;
            details.push(a.detail);
            if let Some((rule, used)) = a.capped {
                out.deviations.push(format!(
                    "client {k} generator trained {used} epochs; the epoch rule asks for {rule}"
                ));
            }
        }
        out.deviations.push(format!(
            "generator noise network is a {}-wide MLP on flattened pixels instead of a U-Net",
            settings.hidden
        ));
        if alpha > 0.0 {
            out.deviations.push("label smoothing applies to synthetic samples only".into());
        }
        out.details.insert("augmentation".into(), serde_json::Value::Array(details));
        out.details.insert("target_count".into(), json!(target));
        Ok(out)
    }

    fn local_update(&self, ctx: &LocalContext, state: &mut ClientState, data: &Dataset) -> Result<LocalOutcome> {
        let s = train_supervised(ctx, state, data, ctx.fed.local_epochs, &SupervisedTerms::default())?;
        Ok(LocalOutcome {
            flops: vec![(Phase::Train, train_flops(&state.model, s.samples, 1))],
        })
    }
}
