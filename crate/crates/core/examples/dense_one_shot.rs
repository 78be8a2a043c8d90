//! One-shot federation: each client uploads once, and the server distills
//! the ensemble into a student using generator-synthesized inputs.
//!
//! ```text
//! cargo run --release --example dense_one_shot
//! ```

use fedbench::data::{gen_synthetic, partition_dirichlet, partition_kfold, Dataset, SyntheticSpec};
use fedbench::federation::{run_federation, Direction, FederationConfig, Phase};
use fedbench::strategies::{DenseParams, StrategyConfig};

fn main() -> fedbench::Result<()> {
    let spec = SyntheticSpec {
        classes: 4,
        samples_per_class: 150,
        shape: vec![1, 8, 8],
        noise_level: 1.0,
        ..Default::default()
    };
    let split = partition_kfold(&gen_synthetic(&spec, 1)?, 6, 0, 1)?;
    let clients = partition_dirichlet(&Dataset::concat(&split.clients)?, 5, 0.5, 1)?;
    let fed = FederationConfig::new(clients.len(), 20, 1);

    let avg = run_federation(&fed, &StrategyConfig::FedAvg, clients.clone(), &split.test)?;
    let dense_config = StrategyConfig::Dense(DenseParams {
        pretrain_epochs: 50,
        ..Default::default()
    });
    let dense = run_federation(&fed, &dense_config, clients, &split.test)?;

    for (name, out) in [("FedAvg", &avg), ("DENSE", &dense)] {
        println!(
            "{name:<7} accuracy {:.3}  uploads {:>3}  downloads {:>3}  MB {:>8.3}",
            out.report.final_accuracy().unwrap_or(f64::NAN),
            out.ledger.count(Direction::Up),
            out.ledger.count(Direction::Down),
            out.ledger.totals().bytes() as f64 / 1e6,
        );
    }
    println!(
        "DENSE server work: {:.2} GFLOP generator, {:.2} GFLOP distillation",
        dense.ledger.flops_by_phase(Phase::Generator) as f64 / 1e9,
        dense.ledger.flops_by_phase(Phase::Distill) as f64 / 1e9
    );
    Ok(())
}
