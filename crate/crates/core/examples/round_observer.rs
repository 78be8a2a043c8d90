//! Watching a run from the inside: a `RoundObserver` sees client models
//! after download, after local training and the fresh global model after
//! aggregation. Here it tracks how far FedBN clients' batch-norm running
//! means wander apart, since FedBN never averages them.
//!
//! ```text
//! cargo run --release --example round_observer
//! ```

use fedbench::data::{apply_feature_shift, gen_synthetic, partition_kfold, ShiftSpec, SyntheticSpec};
use fedbench::federation::{run_federation_with, ClientState, FederationConfig, RoundObserver, RunInputs};
use fedbench::model::Role;
use fedbench::strategies::StrategyConfig;

#[derive(Default)]
struct BnSpread {
    per_round: Vec<f64>,
}

impl RoundObserver for BnSpread {
    fn after_local(&mut self, _round: usize, clients: &[ClientState]) {
        let stats: Vec<Vec<f64>> = clients
            .iter()
            .map(|c| {
                c.model
                    .params()
                    .filter(|(_, p)| p.role == Role::BnStatistic && p.name.ends_with("running_mean"))
                    .flat_map(|(_, p)| p.values.clone())
                    .collect()
            })
            .collect();
        let n = stats.len() as f64;
        let spread = (0..stats[0].len())
            .map(|i| {
                let m = stats.iter().map(|s| s[i]).sum::<f64>() / n;
                stats.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            .sqrt();
        self.per_round.push(spread);
    }
}

fn main() -> fedbench::Result<()> {
    let spec = SyntheticSpec {
        classes: 2,
        ..Default::default()
    };
    let split = partition_kfold(&gen_synthetic(&spec, 4)?, 4, 0, 4)?;
    let shifts = [
        ShiftSpec {
            brightness_offset: 0.4,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec::IDENTITY,
        ShiftSpec {
            contrast_scale: 0.5,
            ..ShiftSpec::IDENTITY
        },
    ];
    let clients = apply_feature_shift(&split.clients, &shifts, 4)?;
    let fed = FederationConfig::new(clients.len(), 8, 4);
    for config in [StrategyConfig::FedAvg, StrategyConfig::FedBn] {
        let mut spread = BnSpread::default();
        let inputs = RunInputs {
            clients: clients.clone(),
            test: split.test.clone(),
            client_tests: None,
        };
        let out = run_federation_with(&fed, &config, inputs, &mut spread)?;
        let series: Vec<String> = spread.per_round.iter().map(|s| format!("{s:.3}")).collect();
        println!("{:<7} BN running-mean spread per round: {}", config.kind().to_string(), series.join(" "));
        println!("        final accuracy {:.3}", out.report.final_accuracy().unwrap_or(f64::NAN));
    }
    Ok(())
}
