//! The four ways of splitting a pool across clients, and what each does to
//! label mix, client size and pixel statistics.
//!
//! ```text
//! cargo run --release --example partitions
//! ```

use fedbench::data::{
    apply_feature_shift, cross_client_std, gen_synthetic, partition_dirichlet, partition_kfold, partition_quantity,
    pixel_stats, Dataset, ShiftSpec, SyntheticSpec,
};

fn show(title: &str, clients: &[Dataset]) -> fedbench::Result<()> {
    println!("{title}");
    for (k, c) in clients.iter().enumerate() {
        let stats = pixel_stats(c)?;
        println!("  client {k}: {:>4} samples, classes {:?}, pixel mean {:+.3}", c.len(), c.class_counts(), stats.mean);
    }
    println!("  cross-client std of pixel means: {:.4}\n", cross_client_std(clients)?);
    Ok(())
}

fn main() -> fedbench::Result<()> {
    let spec = SyntheticSpec {
        classes: 3,
        samples_per_class: 200,
        ..Default::default()
    };
    let pool = gen_synthetic(&spec, 1)?;

    let kfold = partition_kfold(&pool, 4, 0, 1)?;
    show("k-fold (one fold held out as test)", &kfold.clients)?;

    let quantity = partition_quantity(&pool, &[0.1, 0.3, 0.6], 1)?;
    for w in &quantity.warnings {
        println!("warning: {w}");
    }
    show("quantity skew 10% / 30% / 60%", &quantity.clients)?;

    for alpha in [100.0, 1.0, 0.1] {
        let clients = partition_dirichlet(&pool, 4, alpha, 1)?;
        show(&format!("Dirichlet label skew, concentration {alpha}"), &clients)?;
    }

    let shifts = [
        ShiftSpec {
            brightness_offset: 0.25,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec {
            contrast_scale: 0.6,
            ..ShiftSpec::IDENTITY
        },
        ShiftSpec {
            brightness_offset: -0.15,
            noise_sigma: 0.2,
            ..ShiftSpec::IDENTITY
        },
    ];
    let shifted = apply_feature_shift(&kfold.clients, &shifts, 1)?;
    show("feature shift applied to the k-fold clients", &shifted)?;
    Ok(())
}
