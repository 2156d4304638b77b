//! Scratch harness for the runtime-ordering experiment. Not shipped behavior.

use rand::Rng;
use sprout_core::attack::AttackSpec;
use sprout_core::data::Dataset;
use sprout_core::eval::runtime_benchmark;
use sprout_core::model::Architecture;
use sprout_core::rng::{stream_rng, Stream};
use sprout_core::tensor::Tensor;
use sprout_core::train::TrainConfig;
use sprout_core::vicinity::VicinityMode;

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
    let npc: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let arch = match args.get(3).map(String::as_str).unwrap_or("cnn") {
        "mlp" => Architecture::Mlp,
        _ => Architecture::Cnn,
    };
    let ds = gratings(npc, 0.2, 0.05, 1);
    let modes = vec![
        VicinityMode::Natural,
        VicinityMode::Sprout { alpha: 0.01, a: 0.2, delta: 0.1 },
        VicinityMode::AdvTrain { attack: AttackSpec::pgd(0.1, 7, 3) },
    ];
    let mut base = TrainConfig::new(VicinityMode::Natural, arch, epochs, 42);
    base.batch_size = 128;
    base.lr_theta = 0.2;
    for entry in runtime_benchmark(&ds, &modes, &base).unwrap() {
        println!(
            "{:10} {:8.2}s  ratio {:.3}",
            entry.mode, entry.seconds, entry.ratio_to_natural
        );
    }
}
