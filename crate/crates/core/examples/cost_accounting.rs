//! Communication and compute bookkeeping without training anything.
//!
//! `simulate_ledger` replays a strategy's transmission pattern for any model
//! footprint, here a ResNet-50-sized one, so costs can be compared at the
//! scale of a real deployment.
//!
//! ```text
//! cargo run --release --example cost_accounting
//! ```

use fedbench::data::{gen_synthetic, partition_kfold, SyntheticSpec};
use fedbench::federation::{run_federation, simulate_ledger, FederationConfig, Phase};
use fedbench::model::Footprint;
use fedbench::strategies::{StrategyConfig, StrategyKind};

fn main() -> fedbench::Result<()> {
    let resnet = Footprint {
        total: 24_088_000,
        bn: 93_500,
        trainable_layers: 163,
    };
    let (rounds, clients) = (100, 5);
    println!("{rounds} rounds, {clients} clients, {} parameters", resnet.total);
    println!("{:<8} {:>16} {:>12}", "strategy", "scalars", "GB");
    for kind in StrategyKind::ALL {
        let ledger = simulate_ledger(&StrategyConfig::default_for(kind), &resnet, rounds, clients)?;
        let t = ledger.totals();
        println!("{:<8} {:>16} {:>12.2}", kind.to_string(), t.transmitted(), t.bytes() as f64 / 1e9);
    }

    // training FLOPs relative to FedAvg on an actual small run
    let spec = SyntheticSpec {
        classes: 2,
        ..Default::default()
    };
    let split = partition_kfold(&gen_synthetic(&spec, 2)?, 4, 0, 2)?;
    let mut fed = FederationConfig::new(split.clients.len(), 2, 2);
    fed.local_epochs = 1;
    let train = |config: StrategyConfig| -> fedbench::Result<u64> {
        let out = run_federation(&fed, &config, split.clients.clone(), &split.test)?;
        Ok(out.ledger.flops_by_phase(Phase::Train))
    };
    let base = train(StrategyConfig::FedAvg)? as f64;
    println!("\nlocal training FLOPs relative to FedAvg");
    for kind in [StrategyKind::FedProx, StrategyKind::Moon, StrategyKind::FedRs, StrategyKind::Prr] {
        println!("{:<8} {:.3}", kind.to_string(), train(StrategyConfig::default_for(kind))? as f64 / base);
    }
    Ok(())
}
