//! The vicinal loss family: generalized cross entropy over soft labels, and
//! the label/input transformations of each training mode — Gaussian
//! augmentation, uniform and Dirichlet label smoothing, Mixup, PGD-based
//! modes, and their composition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_linf, AttackSpec};
use crate::data::LabeledBatch;
use crate::dirichlet::{sample_dirichlet_conc, DirichletParams};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Probabilities are clamped here before any log; Dirichlet-sampled labels
/// concentrate mass near simplex vertices.
pub const PROB_FLOOR: f64 = 1e-12;

/// Training modes and their hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VicinityMode {
    Natural,
    GaussianAugment { delta: f64 },
    LabelSmooth { alpha: f64 },
    LabelSmoothGaussian { alpha: f64, delta: f64 },
    Mixup { a: f64 },
    AdvTrain { attack: AttackSpec },
    Trades { alpha: f64, attack: AttackSpec },
    Sprout { alpha: f64, a: f64, delta: f64 },
    /// Any on/off combination of the three ingredients of the full method.
    /// With `dirichlet` off the labels fall back to uniform smoothing, so the
    /// all-off corner is plain uniform label smoothing.
    Combo { ga: bool, mixup: bool, dirichlet: bool, alpha: f64, a: f64, delta: f64 },
}

impl VicinityMode {
    pub fn name(&self) -> String {
        match self {
            VicinityMode::Natural => "natural".into(),
            VicinityMode::GaussianAugment { .. } => "ga".into(),
            VicinityMode::LabelSmooth { .. } => "ls".into(),
            VicinityMode::LabelSmoothGaussian { .. } => "ls+ga".into(),
            VicinityMode::Mixup { .. } => "mixup".into(),
            VicinityMode::AdvTrain { .. } => "adv_train".into(),
            VicinityMode::Trades { .. } => "trades".into(),
            VicinityMode::Sprout { .. } => "sprout".into(),
            VicinityMode::Combo { ga, mixup, dirichlet, .. } => {
                let mut parts = Vec::new();
                if *ga {
                    parts.push("ga");
                }
                if *mixup {
                    parts.push("mixup");
                }
                if *dirichlet {
                    parts.push("dirichlet");
                }
                if parts.is_empty() {
                    "uniform_ls".into()
                } else {
                    parts.join("+")
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_alpha = |alpha: f64, lo_open: bool| {
            if alpha < 0.0 || alpha > 1.0 || (lo_open && alpha == 0.0) {
                Err(Error::InvalidArgument(format!(
                    "alpha {alpha} outside the valid smoothing range"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            VicinityMode::Natural => Ok(()),
            VicinityMode::GaussianAugment { delta } => {
                if *delta < 0.0 {
                    Err(Error::InvalidArgument("delta must be >= 0".into()))
                } else {
                    Ok(())
                }
            }
            VicinityMode::LabelSmooth { alpha } => check_alpha(*alpha, false),
            VicinityMode::LabelSmoothGaussian { alpha, delta } => {
                check_alpha(*alpha, false)?;
                if *delta < 0.0 {
                    return Err(Error::InvalidArgument("delta must be >= 0".into()));
                }
                Ok(())
            }
            VicinityMode::Mixup { a } => {
                if *a <= 0.0 {
                    Err(Error::InvalidArgument("mixup shape a must be > 0".into()))
                } else {
                    Ok(())
                }
            }
            VicinityMode::AdvTrain { attack } => attack.validate(),
            VicinityMode::Trades { alpha, attack } => {
                check_alpha(*alpha, false)?;
                attack.validate()
            }
            VicinityMode::Sprout { alpha, a, delta } => {
                check_alpha(*alpha, true)?;
                if *a <= 0.0 || *delta < 0.0 {
                    return Err(Error::InvalidArgument(
                        "sprout needs a > 0 and delta >= 0".into(),
                    ));
                }
                Ok(())
            }
            VicinityMode::Combo { ga, mixup, dirichlet, alpha, a, delta } => {
                check_alpha(*alpha, *dirichlet)?;
                if *mixup && *a <= 0.0 {
                    return Err(Error::InvalidArgument("mixup shape a must be > 0".into()));
                }
                if *ga && *delta < 0.0 {
                    return Err(Error::InvalidArgument("delta must be >= 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn needs_beta(&self) -> bool {
        matches!(
            self,
            VicinityMode::Sprout { .. } | VicinityMode::Combo { dirichlet: true, .. }
        )
    }
}

fn check_label_matrix(labels: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if labels.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: labels.shape().to_vec(),
            reason: "labels must be an N x K matrix".into(),
        });
    }
    Ok((labels.shape()[0], labels.shape()[1]))
}

/// Generalized cross entropy with identity output map:
/// -(1/N) sum_i sum_k log(p_ik) y_ik, probabilities clamped to [1e-12, 1].
/// Recorded for differentiation w.r.t. logits and, through sampled labels,
/// w.r.t. the concentration parameters.
pub fn gce_loss(tape: &mut Tape, logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, _) = check_label_matrix(labels, "gce_loss")?;
    if logits.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "gce_loss",
            lhs: logits.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let probs = tape.softmax(logits)?;
    let clamped = tape.clip(&probs, PROB_FLOOR, 1.0);
    let logp = tape.log(&clamped)?;
    let weighted = tape.mul(&logp, labels)?;
    let total = tape.sum(&weighted);
    Ok(tape.scale(&total, -1.0 / n as f64))
}

/// x + delta * eps with standard normal eps, clipped back to [0, 1].
pub fn gaussian_augment<R: Rng + ?Sized>(x: &Tensor, delta: f64, rng: &mut R) -> Result<Tensor> {
    if delta < 0.0 {
        return Err(Error::InvalidArgument("delta must be >= 0".into()));
    }
    if delta == 0.0 {
        return Ok(x.detached());
    }
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            (v + delta * eps).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Mixup with an explicit mixing weight and pairing permutation (test hook).
pub fn mixup_with(
    x: &Tensor,
    labels: &Tensor,
    lambda: f64,
    perm: &[usize],
) -> Result<(Tensor, Tensor)> {
    let (n, k) = check_label_matrix(labels, "mixup")?;
    if x.shape()[0] != n || perm.len() != n {
        return Err(Error::InvalidShape {
            op: "mixup",
            shape: x.shape().to_vec(),
            reason: format!("expected {n} examples"),
        });
    }
    let ex: usize = x.shape()[1..].iter().product();
    let mut xm = vec![0.0; n * ex];
    let mut ym = vec![0.0; n * k];
    for i in 0..n {
        let j = perm[i];
        for p in 0..ex {
            xm[i * ex + p] = (1.0 - lambda) * x.data()[i * ex + p] + lambda * x.data()[j * ex + p];
        }
        for p in 0..k {
            ym[i * k + p] =
                (1.0 - lambda) * labels.data()[i * k + p] + lambda * labels.data()[j * k + p];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), xm)?,
        Tensor::new(vec![n, k], ym)?,
    ))
}

/// One lambda ~ Beta(a, a) per batch and a random pairing permutation.
pub fn mixup<R: Rng + ?Sized>(
    x: &Tensor,
    labels: &Tensor,
    a: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor, f64)> {
    if a <= 0.0 {
        return Err(Error::InvalidArgument("mixup shape a must be > 0".into()));
    }
    let lambda = sample_beta(a, rng)?;
    let n = labels.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let (xm, ym) = mixup_with(x, labels, lambda, &perm)?;
    Ok((xm, ym, lambda))
}

/// lambda ~ Beta(a, a) via two Gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, rng: &mut R) -> Result<f64> {
    let g1 = crate::dirichlet::sample_gamma(a, rng)?;
    let g2 = crate::dirichlet::sample_gamma(a, rng)?;
    Ok(g1 / (g1 + g2))
}

/// Uniform label smoothing: each row becomes (1 - alpha) y + alpha / K.
pub fn uniform_smooth(labels: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (_, k) = check_label_matrix(labels, "uniform_smooth")?;
    let u = alpha / k as f64;
    let data: Vec<f64> = labels.data().iter().map(|&y| (1.0 - alpha) * y + u).collect();
    Tensor::new(labels.shape().to_vec(), data)
}

/// Per-example state retained from a Dirichlet label draw so the backward
/// pass can reach the concentration parameters without resampling.
#[derive(Debug, Clone)]
pub struct DirichletDraws {
    /// effective concentration per example (after smoothing, before floor)
    pub conc: Vec<Vec<f64>>,
    /// raw Gamma variates that produced each sampled label row
    pub gamma_draws: Vec<Vec<f64>>,
    pub alpha: f64,
}

/// Per-example draw from Dirichlet(scale * ((1 - alpha) y + alpha beta)).
/// `conc_scale` is a test hook; at 1.0 this is the training-time sampler.
pub fn dirichlet_smooth_scaled<R: Rng + ?Sized>(
    labels: &Tensor,
    beta: &DirichletParams,
    alpha: f64,
    conc_scale: f64,
    rng: &mut R,
) -> Result<(Tensor, DirichletDraws)> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dirichlet smoothing needs alpha in (0, 1], got {alpha}"
        )));
    }
    let (n, k) = check_label_matrix(labels, "dirichlet_smooth")?;
    if beta.k() != k {
        return Err(Error::ShapeMismatch {
            op: "dirichlet_smooth",
            lhs: vec![n, k],
            rhs: vec![beta.k()],
        });
    }
    let bvals = beta.beta();
    let mut sampled = vec![0.0; n * k];
    let mut conc_rows = Vec::with_capacity(n);
    let mut draw_rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = &labels.data()[i * k..(i + 1) * k];
        let conc: Vec<f64> = row
            .iter()
            .zip(&bvals)
            .map(|(&y, &b)| conc_scale * ((1.0 - alpha) * y + alpha * b))
            .collect();
        let (point, draws) = sample_dirichlet_conc(&conc, rng)?;
        sampled[i * k..(i + 1) * k].copy_from_slice(&point.z);
        conc_rows.push(conc);
        draw_rows.push(draws);
    }
    Ok((
        Tensor::new(vec![n, k], sampled)?,
        DirichletDraws { conc: conc_rows, gamma_draws: draw_rows, alpha },
    ))
}

pub fn dirichlet_smooth<R: Rng + ?Sized>(
    labels: &Tensor,
    beta: &DirichletParams,
    alpha: f64,
    rng: &mut R,
) -> Result<(Tensor, DirichletDraws)> {
    dirichlet_smooth_scaled(labels, beta, alpha, 1.0, rng)
}

/// The (x~, y~) pair a training mode feeds into the loss, plus any Dirichlet
/// draw state needed for the concentration gradient.
#[derive(Debug, Clone)]
pub struct VicinityBatch {
    pub images: Tensor,
    pub labels: Tensor,
    pub dirichlet: Option<DirichletDraws>,
}

/// Build the vicinal batch for a mode. Gaussian augmentation, Mixup and the
/// Dirichlet draw compose in that order for the full method.
pub fn apply_vicinity<R: Rng + ?Sized>(
    mode: &VicinityMode,
    batch: &LabeledBatch,
    model: &Model,
    beta: Option<&DirichletParams>,
    rng: &mut R,
) -> Result<VicinityBatch> {
    mode.validate()?;
    if mode.needs_beta() && beta.is_none() {
        return Err(Error::InvalidArgument(
            "sprout mode requires concentration parameters".into(),
        ));
    }
    let plain = |images: Tensor, labels: Tensor| VicinityBatch {
        images,
        labels,
        dirichlet: None,
    };
    match mode {
        VicinityMode::Natural => Ok(plain(batch.images.detached(), batch.label_dist.detached())),
        VicinityMode::GaussianAugment { delta } => Ok(plain(
            gaussian_augment(&batch.images, *delta, rng)?,
            batch.label_dist.detached(),
        )),
        VicinityMode::LabelSmooth { alpha } => Ok(plain(
            batch.images.detached(),
            uniform_smooth(&batch.label_dist, *alpha)?,
        )),
        VicinityMode::LabelSmoothGaussian { alpha, delta } => Ok(plain(
            gaussian_augment(&batch.images, *delta, rng)?,
            uniform_smooth(&batch.label_dist, *alpha)?,
        )),
        VicinityMode::Mixup { a } => {
            let (xm, ym, _) = mixup(&batch.images, &batch.label_dist, *a, rng)?;
            Ok(plain(xm, ym))
        }
        VicinityMode::AdvTrain { attack } => {
            let adv = pgd_linf(model, &batch.images, &batch.label_idx, attack)?;
            Ok(plain(adv, batch.label_dist.detached()))
        }
        VicinityMode::Trades { alpha, attack } => {
            let adv = pgd_linf(model, &batch.images, &batch.label_idx, attack)?;
            // model output on the attacked input enters the label as a
            // constant; no gradient flows through it
            let logits = model.logits(&adv)?;
            let k = model.spec.num_classes;
            let probs = kernels::softmax_rows(logits.data(), k);
            let labels: Vec<f64> = batch
                .label_dist
                .data()
                .iter()
                .zip(&probs)
                .map(|(&y, &p)| (1.0 - alpha) * y + alpha * p)
                .collect();
            Ok(plain(adv, Tensor::new(batch.label_dist.shape().to_vec(), labels)?))
        }
        VicinityMode::Sprout { alpha, a, delta } => combo_batch(
            batch,
            beta.expect("checked above"),
            true,
            true,
            *alpha,
            *a,
            *delta,
            rng,
        ),
        VicinityMode::Combo { ga, mixup: mix, dirichlet, alpha, a, delta } => {
            if *dirichlet {
                combo_batch(
                    batch,
                    beta.expect("checked above"),
                    *ga,
                    *mix,
                    *alpha,
                    *a,
                    *delta,
                    rng,
                )
            } else {
                let x = if *ga {
                    gaussian_augment(&batch.images, *delta, rng)?
                } else {
                    batch.images.detached()
                };
                let y = uniform_smooth(&batch.label_dist, *alpha)?;
                let (x, y) = if *mix {
                    let (xm, ym, _) = mixup(&x, &y, *a, rng)?;
                    (xm, ym)
                } else {
                    (x, y)
                };
                Ok(plain(x, y))
            }
        }
    }
}

/// Gaussian noise, then Mixup, then the Dirichlet label draw — the full
/// method's composition with either ingredient switchable off.
#[allow(clippy::too_many_arguments)]
fn combo_batch<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    beta: &DirichletParams,
    ga: bool,
    mix: bool,
    alpha: f64,
    a: f64,
    delta: f64,
    rng: &mut R,
) -> Result<VicinityBatch> {
    let x = if ga {
        gaussian_augment(&batch.images, delta, rng)?
    } else {
        batch.images.detached()
    };
    let (xm, ym) = if mix {
        let (xm, ym, _) = mixup(&x, &batch.label_dist, a, rng)?;
        (xm, ym)
    } else {
        (x, batch.label_dist.detached())
    };
    let (labels, draws) = dirichlet_smooth(&ym, beta, alpha, rng)?;
    Ok(VicinityBatch { images: xm, labels, dirichlet: Some(draws) })
}
