mod common;

use common::{gaussian_mixture, normal, rng};
use fedbench::data::{apply_feature_shift, cross_client_std, gen_synthetic, Dataset, Provenance, ShiftSpec, SyntheticSpec};
use fedbench::diffusion::{
    augment_partition, ddpm_epochs, forward_noise_closed, forward_noise_step, read_ddpm, sample, smooth_labels,
    train_ddpm, write_ddpm, DdpmSettings, DiffusionSchedule,
};
use fedbench::tensor::Tensor;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn draws(seed: u64, n: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(vec![n], (0..n).map(|_| normal(&mut r)).collect())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Two-sided one-sample Kolmogorov-Smirnov p-value against `N(0, 1)`.
fn ks_normal_p(x: &[f64]) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let f = std.cdf(*v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let q: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    q.clamp(0.0, 1.0)
}

fn small_settings(cap: usize) -> DdpmSettings {
    DdpmSettings {
        epoch_cap: cap,
        ..Default::default()
    }
}

#[test]
fn forward_step_examples() {
    let x = draws(1, 8);
    let eps = draws(2, 8);
    let tiny = forward_noise_step(&x, 1e-300, &eps).unwrap();
    assert_eq!(tiny.data, x.data);
    let zero = Tensor::zeros(vec![8]);
    let out = forward_noise_step(&zero, 0.09, &eps).unwrap();
    for (o, e) in out.data.iter().zip(&eps.data) {
        assert!((o - 0.3 * e).abs() < 1e-15);
    }
    assert!(forward_noise_step(&x, 0.0, &eps).is_err());
    assert!(forward_noise_step(&x, 1.0, &eps).is_err());
}

#[test]
fn forward_step_preserves_unit_variance() {
    let n = 100_000;
    let out = forward_noise_step(&draws(3, n), 0.3, &draws(4, n)).unwrap();
    let (m, v) = mean_var(&out.data);
    let se_var = (2.0 / (n as f64 - 1.0)).sqrt();
    assert!((v - 1.0).abs() < 3.0 * se_var, "{v}");
    assert!(m.abs() < 3.0 / (n as f64).sqrt(), "{m}");
}

#[test]
fn schedule_invariants() {
    let s = DdpmSettings::default().schedule().unwrap();
    let mut prod = 1.0;
    for t in 1..=s.timesteps() {
        prod *= 1.0 - s.beta(t);
        assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
        if t > 1 {
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }
    assert!(s.alpha_bar(s.timesteps()) < 0.01);
    assert!(DiffusionSchedule::linear(10, 0.2, 0.1).is_err());
    assert!(DiffusionSchedule::linear(10, 0.0, 0.1).is_err());
}

#[test]
fn closed_form_matches_iterated_steps() {
    let s = DdpmSettings::default().schedule().unwrap();
    let n = 10_000;
    let x0 = Tensor::new(vec![n], vec![0.8; n]);
    let one = forward_noise_closed(&x0, 1, &draws(5, n), &s).unwrap();
    let step = forward_noise_step(&x0, s.beta(1), &draws(5, n)).unwrap();
    assert!(one.data.iter().zip(&step.data).all(|(a, b)| (a - b).abs() < 1e-12));

    let big_t = s.timesteps();
    for t in [1, big_t / 2, big_t] {
        let closed = forward_noise_closed(&x0, t, &draws(10 + t as u64, n), &s).unwrap();
        let mut iterated = x0.clone();
        for step in 1..=t {
            iterated = forward_noise_step(&iterated, s.beta(step), &draws(1000 + step as u64, n)).unwrap();
        }
        let (mc, vc) = mean_var(&closed.data);
        let (mi, vi) = mean_var(&iterated.data);
        let nf = n as f64;
        let se_mean = (vc / nf + vi / nf).sqrt();
        let se_var = (2.0 * vc * vc / (nf - 1.0) + 2.0 * vi * vi / (nf - 1.0)).sqrt();
        assert!((mc - mi).abs() < 3.0 * se_mean, "t={t}: {mc} vs {mi}");
        assert!((vc - vi).abs() < 3.0 * se_var, "t={t}: {vc} vs {vi}");
    }
    assert!(forward_noise_closed(&x0, 0, &draws(1, n), &s).is_err());
    assert!(forward_noise_closed(&x0, big_t + 1, &draws(1, n), &s).is_err());
}

#[test]
fn final_step_is_indistinguishable_from_standard_normal() {
    let s = DdpmSettings::default().schedule().unwrap();
    // centred image data: pixels of a balanced two-class mixture
    let data = gaussian_mixture(6, 2500, 0.2);
    let x0: Vec<f64> = data.samples.iter().flat_map(|s| s.image.iter().map(|&v| v as f64)).collect();
    let n = x0.len();
    assert_eq!(n, 10_000);
    let x_t = forward_noise_closed(&Tensor::new(vec![n], x0), s.timesteps(), &draws(7, n), &s).unwrap();
    let p = ks_normal_p(&x_t.data);
    assert!(p > 0.01, "{p}");
}

#[test]
fn epoch_rule_examples() {
    assert_eq!(ddpm_epochs(2, 2000), 1000);
    assert_eq!(ddpm_epochs(9, 100_000), 90);
    assert_eq!(ddpm_epochs(2, 1_000_000), 2);
    assert_eq!(DdpmSettings::default().epochs_for(2, 100), (20_000, 2000));
}

#[test]
fn training_lowers_the_noise_prediction_loss() {
    let data = gaussian_mixture(8, 200, 0.1);
    let settings = small_settings(30);
    let (_, stats) = train_ddpm(&data, &settings.schedule().unwrap(), &settings.train_config(30), 1).unwrap();
    assert!(stats.initial_loss > 1.0 / 3.0 && stats.initial_loss < 3.0, "{}", stats.initial_loss);
    assert!(stats.final_loss < stats.initial_loss);
    assert!(stats.steps > 0 && stats.flops > 0);

    let mut cfg = settings.train_config(2);
    cfg.ema_decay = 0.0;
    let (ddpm, _) = train_ddpm(&data, &settings.schedule().unwrap(), &cfg, 1).unwrap();
    assert_eq!(ddpm.ema_net, ddpm.noise_net);
}

#[test]
fn sampling_examples() {
    let data = gaussian_mixture(9, 100, 0.1);
    let settings = small_settings(3);
    let (ddpm, _) = train_ddpm(&data, &settings.schedule().unwrap(), &settings.train_config(3), 2).unwrap();
    assert!(sample(&ddpm, 0, 0, 1).unwrap().is_empty());
    let a = sample(&ddpm, 1, 5, 4).unwrap();
    assert_eq!(a, sample(&ddpm, 1, 5, 4).unwrap());
    assert!(a.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    assert!(sample(&ddpm, 2, 1, 1).is_err());
}

#[test]
fn class_conditional_samples_centre_on_the_class_means() {
    let data = gaussian_mixture(10, 500, 0.1);
    let settings = small_settings(300);
    let (_, used) = settings.epochs_for(2, data.len());
    let (ddpm, _) = train_ddpm(&data, &settings.schedule().unwrap(), &settings.train_config(used), 3).unwrap();
    for (label, truth) in [(0, -0.5), (1, 0.5)] {
        let xs = sample(&ddpm, label, 500, 11).unwrap();
        for px in 0..2 {
            let m = xs.iter().map(|x| x[px]).sum::<f64>() / xs.len() as f64;
            assert!((m - truth).abs() < 0.15, "class {label} pixel {px}: {m}");
        }
    }
}

#[test]
fn smoothing_examples() {
    assert_eq!(smooth_labels(&[1.0, 0.0], 0.1, 2).unwrap(), vec![0.95, 0.05]);
    assert!(smooth_labels(&[1.0, 0.0], 0.0, 2).is_err());
    assert!(smooth_labels(&[1.0, 0.0], 1.0, 2).is_err());
    assert!(smooth_labels(&[1.0, 0.0], 0.5, 3).is_err());
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

proptest! {
    #[test]
    fn smoothing_keeps_a_distribution_with_the_same_argmax(k in 2usize..12, hot in 0usize..12, alpha in 0.001f64..0.999) {
        let hot = hot % k;
        let mut y = vec![0.0; k];
        y[hot] = 1.0;
        let s = smooth_labels(&y, alpha, k).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(entropy(&s) > entropy(&y));
        let arg = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(arg, hot);
    }
}

fn clients_of(ds: &Dataset, sizes: &[usize]) -> Vec<Dataset> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (start..start + n).collect();
            start += n;
            ds.subset(&idx)
        })
        .collect()
}

fn image_set(seed: u64, per_class: usize) -> Dataset {
    let spec = SyntheticSpec {
        classes: 2,
        samples_per_class: per_class,
        shape: vec![1, 4, 4],
        class_signal: 0.5,
        noise_level: 0.5,
    };
    gen_synthetic(&spec, seed).unwrap()
}

#[test]
fn augmentation_levels_client_sizes() {
    let ds = image_set(12, 900);
    let clients = clients_of(&ds, &[300, 600, 889]);
    let settings = small_settings(1);
    let schedule = settings.schedule().unwrap();
    for (k, c) in clients.iter().enumerate() {
        let (ddpm, _) = train_ddpm(c, &schedule, &settings.train_config(1), k as u64).unwrap();
        let same = augment_partition(c, &ddpm, c.len(), 0.1, 1).unwrap();
        assert_eq!(&same, c);
        let out = augment_partition(c, &ddpm, 889, 0.1, 1).unwrap();
        assert_eq!(out.len(), 889);
        assert_eq!(&out.samples[..c.len()], &c.samples[..]);
        let synthetic: Vec<_> = out.samples[c.len()..].iter().collect();
        assert!(synthetic.iter().all(|s| s.provenance == Provenance::Synthetic));
        assert!(synthetic.iter().all(|s| s.soft_label.as_ref().is_some_and(|l| l[s.label] == 0.95)));
        assert!(out.validate().is_ok());
        let counts: Vec<usize> = (0..2).map(|c| synthetic.iter().filter(|s| s.label == c).count()).collect();
        assert!(counts[0].abs_diff(counts[1]) <= 1);
        assert!(augment_partition(c, &ddpm, c.len() - 1, 0.1, 1).is_err());
    }
}

#[test]
fn augmentation_pulls_shifted_clients_together() {
    let ds = image_set(13, 300);
    let clients = clients_of(&ds, &[100, 200, 300]);
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
    let shifted = apply_feature_shift(&clients, &shifts, 13).unwrap();
    let settings = small_settings(100);
    let schedule = settings.schedule().unwrap();
    let augmented: Vec<Dataset> = shifted
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let (_, used) = settings.epochs_for(2, c.len());
            let (ddpm, _) = train_ddpm(c, &schedule, &settings.train_config(used), k as u64).unwrap();
            augment_partition(c, &ddpm, 300, 0.1, k as u64).unwrap()
        })
        .collect();
    let (before, after) = (cross_client_std(&shifted).unwrap(), cross_client_std(&augmented).unwrap());
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn checkpoints_round_trip() {
    let data = gaussian_mixture(14, 50, 0.1);
    let settings = small_settings(2);
    let (ddpm, _) = train_ddpm(&data, &settings.schedule().unwrap(), &settings.train_config(2), 5).unwrap();
    let mut buf = Vec::new();
    write_ddpm(&mut buf, &ddpm).unwrap();
    assert!(buf.starts_with(b"DDPM1"));
    assert_eq!(read_ddpm(&mut buf.as_slice()).unwrap(), ddpm);
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_ddpm(&mut bad.as_slice()).is_err());
    assert!(read_ddpm(&mut &buf[..buf.len() - 3]).is_err());
}
