//! Per-client diffusion models fill small, feature-shifted clients with
//! synthetic samples, which pulls the clients' pixel statistics together.
//!
//! ```text
//! cargo run --release --example diffusion_augment [epoch_cap]
//! ```
//!
//! The default cap of 200 epochs takes about ten seconds; the library default
//! of 2000 takes about a minute.

use fedbench::data::{
    apply_feature_shift, cross_client_std, gen_synthetic, pixel_stats, Dataset, Provenance, ShiftSpec, SyntheticSpec,
};
use fedbench::diffusion::{augment_partition, train_ddpm, write_ddpm_file, DdpmSettings};

fn main() -> fedbench::Result<()> {
    let cap: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(200);
    let spec = SyntheticSpec {
        classes: 2,
        samples_per_class: 300,
        shape: vec![1, 8, 8],
        ..Default::default()
    };
    let pool = gen_synthetic(&spec, 3)?;
    let clients: Vec<Dataset> = [0..100, 100..300, 300..600]
        .into_iter()
        .map(|r| pool.subset(&r.collect::<Vec<_>>()))
        .collect();
    let shifts = [
        ShiftSpec {
            brightness_offset: 0.3,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec {
            brightness_offset: -0.2,
            contrast_scale: 0.8,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec {
            noise_sigma: 0.1,
            ..ShiftSpec::IDENTITY
        },
    ];
    let shifted = apply_feature_shift(&clients, &shifts, 3)?;

    let settings = DdpmSettings {
        epoch_cap: cap,
        ..Default::default()
    };
    let schedule = settings.schedule()?;
    let target = shifted.iter().map(Dataset::len).max().unwrap_or(0);
    let mut augmented = Vec::new();
    for (k, client) in shifted.iter().enumerate() {
        let (rule, used) = settings.epochs_for(spec.classes, client.len());
        let (ddpm, stats) = train_ddpm(client, &schedule, &settings.train_config(used), k as u64)?;
        println!(
            "client {k}: {} samples, {used} epochs (rule says {rule}), loss {:.3} -> {:.3}",
            client.len(),
            stats.initial_loss,
            stats.final_loss
        );
        if k == 0 {
            let path = std::env::temp_dir().join("fedbench-client0.ddpm");
            write_ddpm_file(&path, &ddpm)?;
            println!("  checkpoint written to {}", path.display());
        }
        let out = augment_partition(client, &ddpm, target, 0.1, k as u64)?;
        let synthetic = out.samples.iter().filter(|s| s.provenance == Provenance::Synthetic).count();
        println!(
            "  pixel mean {:+.4} -> {:+.4} after {synthetic} synthetic samples",
            pixel_stats(client)?.mean,
            pixel_stats(&out)?.mean
        );
        augmented.push(out);
    }
    println!(
        "cross-client std of pixel means: {:.4} -> {:.4}",
        cross_client_std(&shifted)?,
        cross_client_std(&augmented)?
    );
    Ok(())
}
