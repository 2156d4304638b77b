//! Randomized invariants over the samplers and label transforms.

use proptest::prelude::*;
use rand::Rng;

use sprout_core::dirichlet::{sample_dirichlet_conc, DirichletParams};
use sprout_core::rng::{stream_rng, Stream};
use sprout_core::tensor::Tensor;
use sprout_core::vicinity::{dirichlet_smooth, gaussian_augment, mixup_with, uniform_smooth};

fn onehot(n: usize, k: usize, ys: &[usize]) -> Tensor {
    let mut d = vec![0.0; n * k];
    for (i, &y) in ys.iter().enumerate() {
        d[i * k + y] = 1.0;
    }
    Tensor::new(vec![n, k], d).unwrap()
}

proptest! {
    #[test]
    fn dirichlet_draws_stay_on_simplex(
        conc in proptest::collection::vec(1e-6f64..50.0, 2..8),
        seed in 0u64..1000,
    ) {
        let mut rng = stream_rng(seed, Stream::Vicinity, 0);
        let (point, draws) = sample_dirichlet_conc(&conc, &mut rng).unwrap();
        prop_assert_eq!(draws.len(), conc.len());
        prop_assert!(point.z.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((point.z.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smoothed_labels_stay_on_simplex(
        log_beta in proptest::collection::vec(-5.0f64..5.0, 3),
        alpha in 1e-3f64..1.0,
        y in 0usize..3,
        seed in 0u64..1000,
    ) {
        let beta = DirichletParams::from_log(log_beta).unwrap();
        let labels = onehot(1, 3, &[y]);
        let mut rng = stream_rng(seed, Stream::Vicinity, 1);
        let (smoothed, _) = dirichlet_smooth(&labels, &beta, alpha, &mut rng).unwrap();
        prop_assert!(smoothed.data().iter().all(|&v| v >= 0.0));
        prop_assert!((smoothed.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixup_preserves_simplex_and_pixel_range(
        lambda in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let mut rng = stream_rng(seed, Stream::Vicinity, 2);
        let data: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let x = Tensor::new(vec![4, 1, 2, 3], data).unwrap();
        let y = onehot(4, 3, &[0, 1, 2, 0]);
        let (xm, ym) = mixup_with(&x, &y, lambda, &[1, 2, 3, 0]).unwrap();
        prop_assert!(xm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for row in ym.data().chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_augment_respects_pixel_range(
        delta in 0.0f64..0.5,
        seed in 0u64..1000,
    ) {
        let x = Tensor::new(vec![2, 1, 2, 2], vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.3, 0.6, 0.2]).unwrap();
        let mut rng = stream_rng(seed, Stream::Vicinity, 3);
        let noisy = gaussian_augment(&x, delta, &mut rng).unwrap();
        prop_assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn uniform_smoothing_preserves_simplex(alpha in 0.0f64..=1.0, y in 0usize..5) {
        let labels = onehot(2, 5, &[y, (y + 1) % 5]);
        let s = uniform_smooth(&labels, alpha).unwrap();
        for row in s.data().chunks(5) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
