//! Training loops for every mode, sharing one optimizer and schedule surface.
//! The full method additionally ascends the label concentration vector via
//! the pathwise gradient through its Dirichlet draws, one step per minibatch.

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::data::{minibatch_iter, Dataset, LabeledBatch};
use crate::dirichlet::{pathwise_grad, DirichletParams, CONCENTRATION_FLOOR};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{build_model, Architecture, Model, ModelSpec};
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vicinity::{apply_vicinity, gce_loss, VicinityMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Random,
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: VicinityMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_beta: f64,
    pub momentum: f64,
    pub seed: u64,
    pub init: Init,
    pub architecture: Architecture,
    pub width_factor: usize,
    /// linear warmup horizon (epochs) for the concentration ascent rate
    pub beta_warmup_epochs: usize,
}

impl TrainConfig {
    pub fn new(mode: VicinityMode, architecture: Architecture, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            mode,
            epochs,
            batch_size: 128,
            lr_theta: 0.05,
            lr_beta: 0.1,
            momentum: 0.9,
            seed,
            init: Init::Random,
            architecture,
            width_factor: 1,
            beta_warmup_epochs: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if self.lr_theta <= 0.0 {
            return Err(Error::InvalidArgument("lr_theta must be > 0".into()));
        }
        if self.mode.needs_beta() && self.lr_beta < 0.0 {
            return Err(Error::InvalidArgument("lr_beta must be >= 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub seconds: f64,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let k = self
            .records
            .first()
            .and_then(|r| r.beta.as_ref())
            .map_or(0, |b| b.len());
        let mut out = String::from("epoch,train_loss,clean_acc,seconds");
        for i in 0..k {
            out.push_str(&format!(",beta_{i}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}",
                r.epoch, r.train_loss, r.clean_acc, r.seconds
            ));
            if let Some(beta) = &r.beta {
                for b in beta {
                    out.push_str(&format!(",{b}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Classical momentum update: v <- mu v + g; p <- p - lr v.
pub fn sgd_update(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Vec<f64>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if velocity.len() != param.numel() {
        velocity.resize(param.numel(), 0.0);
    }
    let data = param.data_mut();
    for ((p, g), v) in data.iter_mut().zip(grad.data()).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Mutable training state: model, optional concentration vector, momentum
/// buffers.
pub struct Trainer {
    pub model: Model,
    pub beta: Option<DirichletParams>,
    pub config: TrainConfig,
    velocities: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(dataset: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec {
            architecture: config.architecture,
            width_factor: config.width_factor,
            input_shape: dataset.example_shape(),
            num_classes: dataset.num_classes,
        };
        let (model, mut beta) = match &config.init {
            Init::Random => (build_model(&spec, config.seed)?, None),
            Init::Checkpoint { path } => {
                let ckpt = load_checkpoint(path)?;
                if ckpt.spec != spec {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint spec {:?} does not match requested {:?}",
                        ckpt.spec, spec
                    )));
                }
                (ckpt.model(), ckpt.beta)
            }
        };
        if config.mode.needs_beta() && beta.is_none() {
            let mut rng = stream_rng(config.seed, Stream::BetaInit, 0);
            beta = Some(DirichletParams::random_init(dataset.num_classes, &mut rng)?);
        }
        if !config.mode.needs_beta() {
            beta = None;
        }
        let velocities = model.params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Ok(Trainer { model, beta, config, velocities })
    }

    /// One minibatch step: build the vicinal batch, one backward pass for the
    /// parameter gradients (and the label gradient when a Dirichlet draw is
    /// present), descend theta, ascend log beta. Returns the batch loss.
    pub fn minibatch_step(
        &mut self,
        batch: &LabeledBatch,
        lr_beta_effective: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let vb = apply_vicinity(
            &self.config.mode,
            batch,
            &self.model,
            self.beta.as_ref(),
            rng,
        )?;

        let mut tape = Tape::new();
        let labels = tape.leaf(&vb.labels);
        let (logits, param_ids) = self.model.forward_on(&mut tape, &vb.images, true)?;
        let loss = gce_loss(&mut tape, &logits, &labels)?;
        let loss_value = loss.scalar_value()?;

        let mut wrt = param_ids.clone();
        wrt.push(labels.node().expect("leaf"));
        let grads = tape.backward(&loss, &wrt)?;

        for (i, (param_id, (_, param))) in
            param_ids.iter().zip(self.model.params.iter_mut()).enumerate()
        {
            let g = grads.get_or_zeros(*param_id, param.shape());
            sgd_update(param, &g, &mut self.velocities[i], self.config.lr_theta, self.config.momentum)?;
        }

        if let (Some(beta), Some(draws)) = (self.beta.as_mut(), vb.dirichlet.as_ref()) {
            if lr_beta_effective > 0.0 {
                let dl_dy = grads.get_or_zeros(labels.node().expect("leaf"), vb.labels.shape());
                let k = beta.k();
                let beta_vals = beta.beta();
                let mut g_log_beta = vec![0.0; k];
                for (i, (conc, gamma)) in draws.conc.iter().zip(&draws.gamma_draws).enumerate() {
                    let jac = pathwise_grad(conc, gamma)?;
                    let gy = &dl_dy.data()[i * k..(i + 1) * k];
                    for col in 0..k {
                        if conc[col] <= CONCENTRATION_FLOOR {
                            continue; // clamped entries pass no gradient
                        }
                        let mut g_conc = 0.0;
                        for row in 0..k {
                            g_conc += gy[row] * jac.data()[row * k + col];
                        }
                        // d conc / d log beta = alpha * beta
                        g_log_beta[col] += g_conc * draws.alpha * beta_vals[col];
                    }
                }
                beta.ascend(&g_log_beta, lr_beta_effective);
            }
        }

        Ok(loss_value)
    }

    fn lr_beta_at(&self, epoch: usize) -> f64 {
        let warmup = self.config.beta_warmup_epochs.max(1) as f64;
        self.config.lr_beta * ((epoch as f64 + 1.0) / warmup).min(1.0)
    }
}

/// Full training run; deterministic in (seed, config, dataset).
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    let config_json = serde_json::to_string(config)?;
    let mut trainer = Trainer::new(dataset, config.clone())?;
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches = minibatch_iter(dataset, config.batch_size, config.seed, epoch as u64)?;
        let lr_beta = trainer.lr_beta_at(epoch);
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut rng = stream_rng(
                config.seed,
                Stream::Vicinity,
                ((epoch as u64) << 24) | bi as u64,
            );
            let loss = trainer.minibatch_step(batch, lr_beta, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {bi}"),
                });
            }
            loss_sum += loss;
        }
        let clean_acc = accuracy(&trainer.model, dataset)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            clean_acc,
            seconds: started.elapsed().as_secs_f64(),
            beta: trainer.beta.as_ref().map(|b| b.beta()),
        });
    }

    let ckpt = Checkpoint::from_model(
        &trainer.model,
        trainer.beta.as_ref(),
        config.epochs,
        config.seed,
        config_json,
    );
    Ok((ckpt, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::vicinity::VicinityMode;

    fn blob_config(mode: VicinityMode, epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::new(mode, Architecture::Mlp, epochs, 17);
        c.batch_size = 32;
        c
    }

    #[test]
    fn natural_training_learns_separable_blobs() {
        let ds = synth_blobs(2, 200, 16, 10.0, 0.05, 5).unwrap();
        let (ckpt, history) = train(&ds, &blob_config(VicinityMode::Natural, 5)).unwrap();
        let acc = accuracy(&ckpt.model(), &ds).unwrap();
        assert!(acc >= 0.95, "clean accuracy {acc}");
        assert_eq!(history.records.len(), 5);
        assert!(history.records.iter().all(|r| r.seconds > 0.0));
    }

    #[test]
    fn sprout_is_deterministic_in_seed() {
        let ds = synth_blobs(3, 30, 16, 6.0, 0.05, 2).unwrap();
        let mode = VicinityMode::Sprout { alpha: 0.01, a: 0.2, delta: 0.1 };
        let (c1, _) = train(&ds, &blob_config(mode.clone(), 2)).unwrap();
        let (c2, _) = train(&ds, &blob_config(mode, 2)).unwrap();
        for ((_, p1), (_, p2)) in c1.params.iter().zip(&c2.params) {
            assert_eq!(p1, p2);
        }
        assert_eq!(c1.beta.unwrap(), c2.beta.unwrap());
    }

    #[test]
    fn zero_radius_adversarial_training_matches_natural() {
        let ds = synth_blobs(2, 40, 16, 8.0, 0.05, 3).unwrap();
        let adv = VicinityMode::AdvTrain { attack: crate::attack::AttackSpec::pgd(0.0, 3, 0) };
        let (ca, _) = train(&ds, &blob_config(adv, 2)).unwrap();
        let (cn, _) = train(&ds, &blob_config(VicinityMode::Natural, 2)).unwrap();
        for ((_, pa), (_, pn)) in ca.params.iter().zip(&cn.params) {
            assert_eq!(pa, pn);
        }
    }

    #[test]
    fn zero_lr_beta_leaves_beta_unchanged() {
        let ds = synth_blobs(3, 30, 16, 6.0, 0.05, 2).unwrap();
        let mode = VicinityMode::Sprout { alpha: 0.01, a: 0.2, delta: 0.1 };
        let mut config = blob_config(mode, 2);
        config.lr_beta = 0.0;
        let mut trainer = Trainer::new(&ds, config).unwrap();
        let before = trainer.beta.clone().unwrap();
        let batches = minibatch_iter(&ds, 32, 17, 0).unwrap();
        let mut rng = stream_rng(17, Stream::Vicinity, 0);
        trainer.minibatch_step(&batches[0], 0.0, &mut rng).unwrap();
        assert_eq!(trainer.beta.unwrap(), before);
    }

    #[test]
    fn beta_stays_in_log_box_over_many_steps() {
        let ds = synth_blobs(3, 30, 16, 6.0, 0.05, 2).unwrap();
        let mode = VicinityMode::Sprout { alpha: 0.01, a: 0.2, delta: 0.1 };
        let mut config = blob_config(mode, 1);
        config.lr_beta = 5.0; // aggressive ascent to stress the clamp
        let mut trainer = Trainer::new(&ds, config).unwrap();
        let batches = minibatch_iter(&ds, 32, 17, 0).unwrap();
        for step in 0..200 {
            let mut rng = stream_rng(17, Stream::Vicinity, step);
            trainer
                .minibatch_step(&batches[step as usize % batches.len()], 5.0, &mut rng)
                .unwrap();
            let beta = trainer.beta.as_ref().unwrap();
            assert!(beta.log_beta().iter().all(|v| v.abs() <= 30.0 && v.is_finite()));
        }
    }

    #[test]
    fn sgd_update_cases() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let mut v = vec![0.0; 2];
        // momentum 0 is a plain gradient step
        sgd_update(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[0.95, 2.05]);
        // lr 0 leaves parameters unchanged
        sgd_update(&mut p, &g, &mut v, 0.0, 0.9).unwrap();
        assert_eq!(p.data(), &[0.95, 2.05]);
        // buffer decay keeps moving p after g goes to zero
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        let after_first = p.data().to_vec();
        let zero = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        sgd_update(&mut p, &zero, &mut v, 0.1, 0.9).unwrap();
        assert_ne!(p.data(), &after_first[..]);
        // shape mismatch rejected
        let bad = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(sgd_update(&mut p, &bad, &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn beta_ascent_increases_frozen_loss() {
        // frozen theta, frozen rng: ascending beta by the pathwise gradient
        // must not decrease the (common-random-number) loss for small steps
        let ds = synth_blobs(3, 100, 16, 4.0, 0.1, 8).unwrap();
        let mode = VicinityMode::Sprout { alpha: 0.5, a: 0.2, delta: 0.0 };
        let config = blob_config(mode, 1);
        let trainer = Trainer::new(&ds, config).unwrap();
        let batches = minibatch_iter(&ds, 256, 17, 0).unwrap();
        let batch = &batches[0];

        let eval_loss = |beta: &DirichletParams| -> f64 {
            let mut rng = stream_rng(99, Stream::Vicinity, 0);
            let vb = apply_vicinity(
                &VicinityMode::Sprout { alpha: 0.5, a: 0.2, delta: 0.0 },
                batch,
                &trainer.model,
                Some(beta),
                &mut rng,
            )
            .unwrap();
            let mut tape = Tape::new();
            let (logits, _) = trainer.model.forward_on(&mut tape, &vb.images, false).unwrap();
            gce_loss(&mut tape, &logits, &vb.labels).unwrap().scalar_value().unwrap()
        };

        // gradient at the frozen draw
        let beta0 = trainer.beta.clone().unwrap();
        let mut rng = stream_rng(99, Stream::Vicinity, 0);
        let vb = apply_vicinity(
            &VicinityMode::Sprout { alpha: 0.5, a: 0.2, delta: 0.0 },
            batch,
            &trainer.model,
            Some(&beta0),
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let labels = tape.leaf(&vb.labels);
        let (logits, _) = trainer.model.forward_on(&mut tape, &vb.images, false).unwrap();
        let loss = gce_loss(&mut tape, &logits, &labels).unwrap();
        let grads = tape.backward(&loss, &[labels.node().unwrap()]).unwrap();
        let dl_dy = grads.get_or_zeros(labels.node().unwrap(), vb.labels.shape());

        let draws = vb.dirichlet.as_ref().unwrap();
        let k = beta0.k();
        let beta_vals = beta0.beta();
        let mut g_log_beta = vec![0.0; k];
        for (i, (conc, gamma)) in draws.conc.iter().zip(&draws.gamma_draws).enumerate() {
            let jac = pathwise_grad(conc, gamma).unwrap();
            let gy = &dl_dy.data()[i * k..(i + 1) * k];
            for col in 0..k {
                let mut g_conc = 0.0;
                for row in 0..k {
                    g_conc += gy[row] * jac.data()[row * k + col];
                }
                g_log_beta[col] += g_conc * draws.alpha * beta_vals[col];
            }
        }

        let base = eval_loss(&beta0);
        let mut improved = false;
        for lr in [1e-4, 1e-3] {
            let mut beta1 = beta0.clone();
            beta1.ascend(&g_log_beta, lr);
            let after = eval_loss(&beta1);
            assert!(after >= base - 1e-6, "lr {lr}: loss fell {base} -> {after}");
            if after > base {
                improved = true;
            }
        }
        assert!(improved, "no ascent step increased the loss");
    }
}
