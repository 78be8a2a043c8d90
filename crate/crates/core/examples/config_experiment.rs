//! The benchmark driver used by the `fedbench` binary, called as a library:
//! run a configured sweep, then summarize accuracies and costs.
//!
//! ```text
//! cargo run --release --example config_experiment [config] [out_dir]
//! ```

use std::path::PathBuf;

use fedbench::bench::{cmd_costs, cmd_run, cmd_summarize, ExperimentConfig};

fn main() -> fedbench::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/noniid.conf"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fedbench-example"));

    let cfg = ExperimentConfig::from_text(&std::fs::read_to_string(&config)?)?;
    let summary = cmd_run(&cfg, &out)?;
    println!("{} reports written under {}", summary.reports.len(), out.display());
    for f in &summary.failures {
        println!("failed: {f:?}");
    }

    let (table, warnings) = cmd_summarize(std::slice::from_ref(&out), &out)?;
    warnings.iter().for_each(|w| println!("warning: {w}"));
    println!("{}", table.render());

    let (costs, _) = cmd_costs(std::slice::from_ref(&out), &out)?;
    println!("{:<8} {:>4} {:>11} {:>12} {:>9}", "strategy", "fold", "converged", "MB to cost", "accuracy");
    for row in &costs {
        let converged = row.convergence_round.map_or("-".to_string(), |r| r.to_string());
        println!(
            "{:<8} {:>4} {:>11} {:>12.3} {:>9.3}",
            row.strategy,
            row.fold,
            converged,
            row.bytes_at_cost_round as f64 / 1e6,
            row.final_accuracy
        );
    }
    Ok(())
}
