//! Federated averaging on a small synthetic image task.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use fedbench::data::{gen_synthetic, partition_kfold, SyntheticSpec};
use fedbench::federation::{run_federation, FederationConfig};
use fedbench::strategies::StrategyConfig;

fn main() -> fedbench::Result<()> {
    let spec = SyntheticSpec {
        classes: 3,
        samples_per_class: 120,
        shape: vec![1, 16, 16],
        class_signal: 0.3,
        noise_level: 1.5,
    };
    let pool = gen_synthetic(&spec, 7)?;

    // five folds: four become clients, one is held out for testing
    let split = partition_kfold(&pool, 5, 0, 7)?;
    let mut fed = FederationConfig::new(split.clients.len(), 25, 7);
    fed.local_epochs = 2;
    fed.batch_size = 32;

    let out = run_federation(&fed, &StrategyConfig::FedAvg, split.clients, &split.test)?;
    println!("round  global  personalized  MB sent");
    for r in &out.report.records {
        println!(
            "{:>5}  {:>6.3}  {:>12.3}  {:>7.3}",
            r.round,
            r.global_acc.unwrap_or(f64::NAN),
            r.pers_acc.unwrap_or(f64::NAN),
            r.cum_bytes as f64 / 1e6
        );
    }
    match out.report.convergence_round {
        Some(r) => println!("converged at round {r}"),
        None => println!("no plateau within {} rounds", fed.rounds),
    }
    Ok(())
}
