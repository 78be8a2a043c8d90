//! Every strategy on the same label-skewed federation, side by side.
//!
//! ```text
//! cargo run --release --example strategy_sweep
//! ```

use fedbench::data::{gen_synthetic, partition_dirichlet, partition_kfold, Dataset, SyntheticSpec};
use fedbench::diffusion::DdpmSettings;
use fedbench::federation::{run_federation, FederationConfig, Phase};
use fedbench::strategies::{DenseParams, OursParams, StrategyConfig, StrategyKind};

fn main() -> fedbench::Result<()> {
    let spec = SyntheticSpec {
        classes: 4,
        samples_per_class: 150,
        shape: vec![1, 8, 8],
        noise_level: 1.0,
        ..Default::default()
    };
    let pool = gen_synthetic(&spec, 0)?;
    let split = partition_kfold(&pool, 6, 0, 0)?;
    let clients = partition_dirichlet(&Dataset::concat(&split.clients)?, 5, 0.5, 0)?;
    for (k, c) in clients.iter().enumerate() {
        println!("client {k}: class counts {:?}", c.class_counts());
    }

    let fed = FederationConfig::new(clients.len(), 15, 0);
    println!("\n{:<8} {:>8} {:>10} {:>12} {:>10}", "strategy", "final", "drift", "MB", "GFLOP");
    for kind in StrategyKind::ALL {
        let config = match StrategyConfig::default_for(kind) {
            // shorter generator schedules keep the sweep to a few seconds
            StrategyConfig::Dense(p) => StrategyConfig::Dense(DenseParams {
                pretrain_epochs: 30,
                ..p
            }),
            StrategyConfig::Ours(p) => StrategyConfig::Ours(OursParams {
                ddpm: DdpmSettings {
                    epoch_cap: 100,
                    ..p.ddpm
                },
                ..p
            }),
            other => other,
        };
        let out = run_federation(&fed, &config, clients.clone(), &split.test)?;
        let drift = out.drift.iter().sum::<f64>() / out.drift.len() as f64;
        println!(
            "{:<8} {:>8.3} {:>10.4} {:>12.2} {:>10.2}",
            kind.to_string(),
            out.report.final_accuracy().unwrap_or(f64::NAN),
            drift,
            out.ledger.totals().bytes() as f64 / 1e6,
            out.ledger.total_flops() as f64 / 1e9,
        );
        let synthesis = out.ledger.flops_by_phase(Phase::Synthesis);
        if synthesis > 0 {
            println!("{:<8} includes {:.2} GFLOP of DDPM training and sampling", "", synthesis as f64 / 1e9);
        }
    }
    Ok(())
}
