use latmap::data::{synthesize_dataset, SynthSpec};
use latmap::vae::*;
use latmap::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn column_stats(t: &Tensor, k: usize) -> (f64, f64) {
    let n = t.rows() as f64;
    let mean = (0..t.rows()).map(|i| t.row(i)[k]).sum::<f64>() / n;
    let var = (0..t.rows()).map(|i| (t.row(i)[k] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn encoding_normalization_contract() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = Tensor::from_fn(&[64, 64], |_| 3.0 + 5.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let sigma = Tensor::from_fn(&[64, 64], |_| rng.random_range(0.0..4.0));
        let out = LatentBatch::new(mu, sigma).unwrap().normalized(2.5, 1e-8).unwrap();
        for k in 0..64 {
            let (m, s) = column_stats(&out.mu, k);
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((s - 2.5).abs() < 1e-4, "std {s}");
        }
        assert!(out.sigma.data().iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn constant_batch_normalizes_to_zeros() {
    let b = LatentBatch::new(Tensor::full(&[64, 64], 1.7), Tensor::full(&[64, 64], 0.3)).unwrap();
    let out = b.normalized(2.5, 1e-8).unwrap();
    assert!(out.mu.data().iter().all(|&v| v == 0.0));
    assert!(out.sigma.is_finite());
}

#[test]
fn reparameterized_samples_have_the_encoded_moments() {
    let mu = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.5]).unwrap();
    let sigma = Tensor::new(vec![1, 3], vec![0.5, 1.0, 0.0]).unwrap();
    let b = LatentBatch::new(mu, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let noise = Tensor::from_fn(&[1, 3], |_| StandardNormal.sample(&mut rng));
        let z = reparameterize(&b, &noise).unwrap();
        for k in 0..3 {
            sum[k] += z.data()[k];
            sq[k] += z.data()[k] * z.data()[k];
        }
    }
    for (k, (m, s)) in [(-1.0, 0.5), (0.0, 1.0), (2.5, 0.0)].into_iter().enumerate() {
        let mean = sum[k] / n as f64;
        let std = (sq[k] / n as f64 - mean * mean).max(0.0).sqrt();
        // Five standard errors.
        assert!((mean - m).abs() < 5.0 * s / (n as f64).sqrt() + 1e-12, "mean {k}: {mean}");
        assert!((std - s).abs() < 5.0 * s / (2.0 * n as f64).sqrt() + 1e-6, "std {k}: {std}");
    }
}

#[test]
fn schedule_reference_values() {
    let s = TrainSchedule {
        iterations: 1000,
        ..TrainSchedule::default()
    };
    assert!((s.lr_at(1).unwrap() - 0.001).abs() < 1e-12);
    assert!((s.lr_at(500).unwrap() - 6.25e-5).abs() < 1e-12);
    assert!((s.lr_at(1000).unwrap() - 3.90625e-6).abs() < 1e-12);
    assert!((s.beta1_at(500).unwrap() - 0.45 / 0.55).abs() < 1e-12);
    assert_eq!(s.beta1_at(1000).unwrap(), 0.0);
    assert!((s.beta1_at_progress(0.0) - 0.9).abs() < 1e-15);
    let mut distinct: Vec<f64> = (1..=1000).map(|t| s.lr_at(t).unwrap()).collect();
    distinct.dedup();
    assert_eq!(distinct.len(), 9);
    assert!(s.lr_at(0).is_err() && s.lr_at(1001).is_err());
}

#[test]
fn short_training_reduces_loss() {
    let ds = synthesize_dataset(
        &SynthSpec {
            per_cluster: 20,
            ..SynthSpec::default()
        },
        1,
    )
    .unwrap()
    .normalized()
    .unwrap();
    let arch = VaeArchitecture {
        side: 16,
        latent: 4,
        channels: vec![4, 8],
        kernel: 3,
    };
    for mode in objective_names() {
        let model = VaeModel::new(arch.clone(), VaeLossConfig::with_mode(mode), 2).unwrap();
        let schedule = TrainSchedule {
            iterations: 200,
            batch_size: 16,
            eta_start: 0.003,
            ..TrainSchedule::default()
        };
        let options = TrainOptions {
            seed: 2,
            ..TrainOptions::default()
        };
        let (_, trace) = train(model, &ds.as_batch(), schedule, options).unwrap();
        let head: f64 = trace[..20].iter().map(|r| r.total).sum::<f64>() / 20.0;
        let tail: f64 = trace[180..].iter().map(|r| r.total).sum::<f64>() / 20.0;
        assert!(tail < head, "{mode}: {head} -> {tail}");
        assert!(trace.iter().all(|r| r.total.is_finite()));
    }
}
