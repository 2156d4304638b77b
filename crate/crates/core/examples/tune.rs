//! Scratch harness for picking dataset/training scales. Not shipped behavior.

use rand::Rng;
use sprout_core::attack::AttackSpec;
use sprout_core::data::{synth_blobs, Dataset};
use sprout_core::rng::{stream_rng, Stream};
use sprout_core::tensor::Tensor;
use sprout_core::eval::{accuracy, robust_accuracy};
use sprout_core::model::Architecture;
use sprout_core::train::{train, TrainConfig};
use sprout_core::vicinity::VicinityMode;

/// 10 orientation classes of sinusoidal gratings at 28x28 with random phase
/// and Gaussian pixel noise; `amp` reuses the separation slot, `sigma` the
/// noise slot.
fn gratings(n_per_class: usize, amp: f64, sigma: f64, seed: u64) -> Dataset {
    let (h, w, k) = (28usize, 28usize, 10usize);
    let freq = 4.0;
    let mut rng = stream_rng(seed, Stream::Data, 1);
    let n = k * n_per_class;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for class in 0..k {
        let theta = class as f64 * std::f64::consts::PI / k as f64;
        let (st, ct) = theta.sin_cos();
        for _ in 0..n_per_class {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for r in 0..h {
                for c in 0..w {
                    let t = freq * std::f64::consts::TAU * (r as f64 * ct + c as f64 * st)
                        / h as f64;
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    let v = 0.5 + amp * (t + phase).sin() + sigma * noise;
                    data.push((v * 255.0).round().clamp(0.0, 255.0) / 255.0);
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, 1, h, w], data).unwrap();
    Dataset::new(images, labels, k, "gratings".into()).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sep: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30.0);
    let sigma: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
    let npc: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let modes_arg = args.get(5).cloned().unwrap_or_else(|| "natural,sprout".into());

    let dim: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(784);
    let lr: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let kind = args.get(8).cloned().unwrap_or_else(|| "blobs".into());
    let delta: f64 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let ds = if kind == "gratings" {
        gratings(npc, sep, sigma, 1)
    } else {
        synth_blobs(10, npc, dim, sep, sigma, 1).unwrap()
    };
    let eval_ds = ds.sample(500, 99).unwrap();
    let attack = AttackSpec::pgd(0.1, 20, 7);

    for name in modes_arg.split(',') {
        let mode = match name {
            "natural" => VicinityMode::Natural,
            "sprout" => VicinityMode::Sprout { alpha: 0.01, a: 0.2, delta },
            "ls" => VicinityMode::LabelSmooth { alpha: 0.01 },
            combo => VicinityMode::Combo {
                ga: combo.split('+').any(|p| p == "ga"),
                mixup: combo.split('+').any(|p| p == "mixup"),
                dirichlet: combo.split('+').any(|p| p == "dirichlet"),
                alpha: 0.01,
                a: 0.2,
                delta,
            },
        };
        let mut config = TrainConfig::new(mode, Architecture::Cnn, epochs, 42);
        config.batch_size = 128;
        config.lr_theta = lr;
        let t0 = std::time::Instant::now();
        let (ckpt, history) = train(&ds, &config).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let model = ckpt.model();
        let clean = accuracy(&model, &eval_ds).unwrap();
        let robust = robust_accuracy(&model, &eval_ds, &attack).unwrap();
        let curve: Vec<String> = history
            .records
            .iter()
            .map(|r| format!("{:.2}/{:.3}", r.clean_acc, r.train_loss))
            .collect();
        println!(
            "{name:12} train {secs:7.1}s  clean {clean:.3}  robust {robust:.3}  epochs[acc/loss]: {}",
            curve.join(" ")
        );
    }
}
