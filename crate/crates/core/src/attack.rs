//! PGD attack under an l-infinity budget, with random starts, multiple
//! restarts and a choice of cross-entropy or logit-margin objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;
/// Examples per inner PGD batch; bounds tape memory.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    CwMargin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSpec {
    /// l-infinity radius in pixel units
    pub epsilon: f64,
    pub steps: usize,
    /// defaults to epsilon / 5 when unset
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub loss: AttackLoss,
    /// restart 0 starts at the clean input, giving loss(adv) >= loss(clean)
    pub include_zero_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        AttackSpec {
            epsilon,
            steps,
            step_size: None,
            restarts: 1,
            loss: AttackLoss::CrossEntropy,
            include_zero_start: true,
            seed,
        }
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 5.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        if self.steps > 0 && self.epsilon > 0.0 && self.effective_step_size() <= 0.0 {
            return Err(Error::InvalidArgument("step_size must be > 0 when steps > 0".into()));
        }
        Ok(())
    }
}

/// Margin loss on a tape: -(1/n) mean of max(z_y - max_{k!=y} z_k, 0).
/// Maximizing it pushes the true-class margin negative; kappa is 0.
pub fn cw_margin_loss(tape: &mut Tape, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    tape.cw_margin(logits, targets)
}

/// Per-example attack loss from detached logits.
fn per_example_loss(logits: &Tensor, targets: &[usize], kind: AttackLoss) -> Vec<f64> {
    let k = logits.shape()[1];
    match kind {
        AttackLoss::CrossEntropy => {
            let probs = kernels::softmax_rows(logits.data(), k);
            targets
                .iter()
                .enumerate()
                .map(|(i, &y)| -probs[i * k + y].max(PROB_FLOOR).ln())
                .collect()
        }
        AttackLoss::CwMargin => targets
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &logits.data()[i * k..(i + 1) * k];
                let other = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != y)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                -(row[y] - other).max(0.0)
            })
            .collect(),
    }
}

/// PGD-l_inf. Guarantees ||x_adv - x||_inf <= epsilon + 1e-12 and
/// x_adv in [0, 1]; per example, the returned candidate maximizes the attack
/// loss over every iterate of every restart.
pub fn pgd_linf(model: &Model, x: &Tensor, targets: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    if x.shape().is_empty() || x.shape()[0] != targets.len() {
        return Err(Error::InvalidShape {
            op: "pgd_linf",
            shape: x.shape().to_vec(),
            reason: format!("expected {} examples", targets.len()),
        });
    }
    let n = x.shape()[0];
    let ex: usize = x.shape()[1..].iter().product();
    let mut out = vec![0.0; n * ex];

    for (ci, chunk_start) in (0..n).step_by(CHUNK).enumerate() {
        let chunk_end = (chunk_start + CHUNK).min(n);
        let cn = chunk_end - chunk_start;
        let mut shape = x.shape().to_vec();
        shape[0] = cn;
        let x0 = Tensor::new(
            shape.clone(),
            x.data()[chunk_start * ex..chunk_end * ex].to_vec(),
        )?;
        let ty = &targets[chunk_start..chunk_end];

        let mut best = x0.data().to_vec();
        let mut best_loss = vec![f64::NEG_INFINITY; cn];

        for restart in 0..spec.restarts {
            let mut rng = stream_rng(spec.seed, Stream::Attack, (restart as u64) << 20 | ci as u64);
            let mut adv: Vec<f64> = if restart == 0 && spec.include_zero_start {
                x0.data().to_vec()
            } else {
                x0.data()
                    .iter()
                    .map(|&v| (v + rng.gen_range(-spec.epsilon..=spec.epsilon)).clamp(0.0, 1.0))
                    .collect()
            };

            for step in 0..=spec.steps {
                let adv_t = Tensor::new(shape.clone(), adv.clone())?;
                let last = step == spec.steps;

                let (losses, grad) = if last {
                    (per_example_loss(&model.logits(&adv_t)?, ty, spec.loss), None)
                } else {
                    let mut tape = Tape::new();
                    let x_leaf = tape.leaf(&adv_t);
                    let (logits, _) = model.forward_on(&mut tape, &x_leaf, false)?;
                    let loss = match spec.loss {
                        AttackLoss::CrossEntropy => {
                            let logp = tape.log_softmax(&logits)?;
                            let picked = tape.gather(&logp, ty)?;
                            let s = tape.sum(&picked);
                            tape.scale(&s, -1.0 / cn as f64)
                        }
                        AttackLoss::CwMargin => tape.cw_margin(&logits, ty)?,
                    };
                    let lv = loss.scalar_value()?;
                    if !lv.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("pgd loss at restart {restart}, step {step}"),
                        });
                    }
                    let grads = tape.backward(&loss, &[x_leaf.node().expect("leaf")])?;
                    let g = grads
                        .get_or_zeros(x_leaf.node().expect("leaf"), adv_t.shape())
                        .into_data();
                    (per_example_loss(&logits, ty, spec.loss), Some(g))
                };

                for (i, &l) in losses.iter().enumerate() {
                    if l > best_loss[i] {
                        best_loss[i] = l;
                        best[i * ex..(i + 1) * ex].copy_from_slice(&adv[i * ex..(i + 1) * ex]);
                    }
                }

                if let Some(g) = grad {
                    let step_size = spec.effective_step_size();
                    for (i, (a, gv)) in adv.iter_mut().zip(&g).enumerate() {
                        let x0v = x0.data()[i];
                        *a = (*a + step_size * gv.signum())
                            .clamp(x0v - spec.epsilon, x0v + spec.epsilon)
                            .clamp(0.0, 1.0);
                    }
                }
            }
        }
        out[chunk_start * ex..chunk_end * ex].copy_from_slice(&best);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Craft adversarial examples against `source`, measure accuracy on `target`.
pub fn transfer_eval(
    source: &Model,
    target: &Model,
    dataset: &Dataset,
    spec: &AttackSpec,
) -> Result<f64> {
    if source.spec.input_shape != target.spec.input_shape
        || source.spec.num_classes != target.spec.num_classes
    {
        return Err(Error::InvalidArgument(
            "transfer_eval models disagree on input shape or class count".into(),
        ));
    }
    if dataset.example_shape() != target.spec.input_shape
        || dataset.num_classes != target.spec.num_classes
    {
        return Err(Error::InvalidArgument(
            "transfer_eval dataset does not match the models".into(),
        ));
    }
    let adv = pgd_linf(source, &dataset.images, &dataset.labels, spec)?;
    let preds = target.predict(&adv)?;
    let correct = preds
        .iter()
        .zip(&dataset.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
