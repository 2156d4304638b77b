//! Evaluation suite: clean and adversarial accuracy, semantic-transform
//! invariance, loss-landscape grids, input-gradient diversity, concentration
//! correlation export and wall-clock comparisons across training modes.

use rand::Rng;
use serde::Serialize;

use crate::attack::{pgd_linf, AttackLoss, AttackSpec};
use crate::data::Dataset;
use crate::dirichlet::{correlation_matrix, DirichletParams};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig};
use crate::vicinity::VicinityMode;

/// Fraction of `dataset` the model classifies correctly.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let preds = model.predict(&dataset.images)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy under a PGD attack; a zero-radius spec reproduces clean accuracy
/// exactly because the attack returns the inputs untouched.
pub fn robust_accuracy(model: &Model, dataset: &Dataset, spec: &AttackSpec) -> Result<f64> {
    let adv = pgd_linf(model, &dataset.images, &dataset.labels, spec)?;
    let preds = model.predict(&adv)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean cross entropy and its gradient w.r.t. the input batch.
fn ce_and_input_grad(model: &Model, x: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let n = targets.len();
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let (logits, _) = model.forward_on(&mut tape, &leaf, false)?;
    let logp = tape.log_softmax(&logits)?;
    let picked = tape.gather(&logp, targets)?;
    let s = tape.sum(&picked);
    let loss = tape.scale(&s, -1.0 / n as f64);
    let id = leaf.node().expect("leaf");
    let grads = tape.backward(&loss, &[id])?;
    Ok((loss.scalar_value()?, grads.get_or_zeros(id, x.shape())))
}

fn ce_loss(model: &Model, x: &Tensor, targets: &[usize]) -> Result<f64> {
    let logits = model.logits(x)?;
    let k = logits.shape()[1];
    let logp = crate::kernels::log_softmax_rows(logits.data(), k);
    let sum: f64 = targets.iter().enumerate().map(|(i, &y)| -logp[i * k + y]).sum();
    Ok(sum / targets.len() as f64)
}

// ---------------------------------------------------------------------------
// semantic transforms

/// Rotation about the image center by `degrees`, bilinear interpolation,
/// out-of-frame samples filled with zero. Applied per channel.
pub fn rotate(x: &Tensor, degrees: f64) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::InvalidShape {
            op: "rotate",
            shape: x.shape().to_vec(),
            reason: "expected NCHW".into(),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let src = &x.data()[base..base + h * w];
            for r in 0..h {
                for col in 0..w {
                    // inverse map: sample the source at the back-rotated point
                    let dy = r as f64 - cy;
                    let dx = col as f64 - cx;
                    let sy = cos * dy + sin * dx + cy;
                    let sx = -sin * dy + cos * dx + cx;
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let mut acc = 0.0;
                    for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                        for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                            let yy = y0 as i64 + oy;
                            let xx = x0 as i64 + ox;
                            if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                                acc += wy * wx * src[yy as usize * w + xx as usize];
                            }
                        }
                    }
                    out[base + r * w + col] = acc;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Brightness boost: clip(1.5 x) into [0, 1].
pub fn brighten(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| (1.5 * v).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Contrast stretch about each example's mean: clip(m + 2 (x - m)).
pub fn contrast(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::InvalidShape {
            op: "contrast",
            shape: x.shape().to_vec(),
            reason: "expected NCHW".into(),
        });
    }
    let ex: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(x.numel());
    for img in x.data().chunks(ex) {
        let m = img.iter().sum::<f64>() / ex as f64;
        out.extend(img.iter().map(|&v| (m + 2.0 * (v - m)).clamp(0.0, 1.0)));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Channel-mean grayscale, replicated back to every channel. Returns None for
/// single-channel inputs, where the transform is the identity.
pub fn grayscale(x: &Tensor) -> Result<Option<Tensor>> {
    if x.shape().len() != 4 {
        return Err(Error::InvalidShape {
            op: "grayscale",
            shape: x.shape().to_vec(),
            reason: "expected NCHW".into(),
        });
    }
    let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    if c == 1 {
        return Ok(None);
    }
    let mut out = vec![0.0; x.numel()];
    for ni in 0..n {
        for p in 0..hw {
            let mean = (0..c)
                .map(|ci| x.data()[(ni * c + ci) * hw + p])
                .sum::<f64>()
                / c as f64;
            for ci in 0..c {
                out[(ni * c + ci) * hw + p] = mean;
            }
        }
    }
    Ok(Some(Tensor::new(x.shape().to_vec(), out)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceEntry {
    pub transform: String,
    /// None marks a transform skipped because it is an identity on this data
    pub accuracy: Option<f64>,
}

/// Accuracy under each semantic transform. Grayscale is skipped (not silently
/// equal to clean accuracy) on single-channel data.
pub fn invariance_suite(model: &Model, dataset: &Dataset) -> Result<Vec<InvarianceEntry>> {
    let acc_on = |x: &Tensor| -> Result<f64> {
        let preds = model.predict(x)?;
        let correct = preds.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / dataset.len() as f64)
    };
    let mut out = vec![
        InvarianceEntry {
            transform: "rotate_10deg".into(),
            accuracy: Some(acc_on(&rotate(&dataset.images, 10.0)?)?),
        },
        InvarianceEntry {
            transform: "brightness_1.5x".into(),
            accuracy: Some(acc_on(&brighten(&dataset.images))?),
        },
        InvarianceEntry {
            transform: "contrast_2x".into(),
            accuracy: Some(acc_on(&contrast(&dataset.images)?)?),
        },
    ];
    out.push(InvarianceEntry {
        transform: "grayscale".into(),
        accuracy: match grayscale(&dataset.images)? {
            Some(g) => Some(acc_on(&g)?),
            None => None,
        },
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// loss landscape

#[derive(Debug, Clone, Serialize)]
pub struct Landscape {
    pub max_mag: f64,
    pub n_grid: usize,
    /// (n_grid + 1)^2 cross-entropy values, row-major over (u, v)
    pub grid: Vec<Vec<f64>>,
}

impl Landscape {
    pub fn min(&self) -> f64 {
        self.grid.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b))
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.grid {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Cross entropy on a 2-D grid of input perturbations: the first axis follows
/// the loss-gradient sign direction, the second a seeded Rademacher direction.
/// Grid coordinates run over [-max_mag, max_mag] with n_grid + 1 points each.
pub fn loss_landscape(
    model: &Model,
    dataset: &Dataset,
    max_mag: f64,
    n_grid: usize,
    seed: u64,
) -> Result<Landscape> {
    if max_mag <= 0.0 || n_grid < 1 {
        return Err(Error::InvalidArgument(
            "loss_landscape needs max_mag > 0 and n_grid >= 1".into(),
        ));
    }
    let x = &dataset.images;
    let (_, grad) = ce_and_input_grad(model, x, &dataset.labels)?;
    let d1: Vec<f64> = grad.data().iter().map(|v| v.signum()).collect();
    let mut rng = stream_rng(seed, Stream::Eval, 0);
    let d2: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let coord = |i: usize| -max_mag + 2.0 * max_mag * i as f64 / n_grid as f64;
    let mut grid = Vec::with_capacity(n_grid + 1);
    for i in 0..=n_grid {
        let u = coord(i);
        let mut row = Vec::with_capacity(n_grid + 1);
        for j in 0..=n_grid {
            let v = coord(j);
            let data: Vec<f64> = x
                .data()
                .iter()
                .zip(&d1)
                .zip(&d2)
                .map(|((&p, &a), &b)| p + u * a + v * b)
                .collect();
            let shifted = Tensor::new(x.shape().to_vec(), data)?;
            row.push(ce_loss(model, &shifted, &dataset.labels)?);
        }
        grid.push(row);
    }
    Ok(Landscape { max_mag, n_grid, grid })
}

// ---------------------------------------------------------------------------
// gradient diversity

#[derive(Debug, Clone, Serialize)]
pub struct GradientDiversity {
    pub model_names: Vec<String>,
    /// mean over examples of the cosine between two models' input gradients;
    /// the diagonal is None (self-similarity is not applicable)
    pub matrix: Vec<Vec<Option<f64>>>,
    /// examples dropped because some model's gradient was exactly zero
    pub zero_grad_examples: usize,
    pub examples_used: usize,
}

impl GradientDiversity {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for name in &self.model_names {
            out.push_str(&format!(",{name}"));
        }
        out.push('\n');
        for (name, row) in self.model_names.iter().zip(&self.matrix) {
            out.push_str(name);
            for cell in row {
                match cell {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push_str(",na"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// For each example, flatten every model's cross-entropy input gradient and
/// average the pairwise cosines over examples. An example where any model has
/// an exactly zero gradient is excluded and counted.
pub fn gradient_diversity(
    models: &[(String, Model)],
    dataset: &Dataset,
) -> Result<GradientDiversity> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(
            "gradient diversity needs at least two models".into(),
        ));
    }
    for (_, m) in models {
        if m.spec.input_shape != dataset.example_shape() || m.spec.num_classes != dataset.num_classes
        {
            return Err(Error::InvalidArgument(
                "gradient diversity models must match the dataset shape and class count".into(),
            ));
        }
    }
    let ex: usize = dataset.example_shape().iter().product();
    let mut shape = vec![1];
    shape.extend(dataset.example_shape());
    let nm = models.len();
    let mut sums = vec![0.0; nm * nm];
    let mut zero = 0usize;
    let mut used = 0usize;
    for i in 0..dataset.len() {
        let xi = Tensor::new(
            shape.clone(),
            dataset.images.data()[i * ex..(i + 1) * ex].to_vec(),
        )?;
        let mut unit: Vec<Vec<f64>> = Vec::with_capacity(nm);
        let mut degenerate = false;
        for (_, model) in models {
            let (_, g) = ce_and_input_grad(model, &xi, &dataset.labels[i..i + 1])?;
            let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                degenerate = true;
                break;
            }
            unit.push(g.data().iter().map(|v| v / norm).collect());
        }
        if degenerate {
            zero += 1;
            continue;
        }
        used += 1;
        for a in 0..nm {
            for b in a + 1..nm {
                let cos: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
                sums[a * nm + b] += cos;
                sums[b * nm + a] += cos;
            }
        }
    }
    let matrix = (0..nm)
        .map(|a| {
            (0..nm)
                .map(|b| {
                    if a == b || used == 0 {
                        None
                    } else {
                        Some(sums[a * nm + b] / used as f64)
                    }
                })
                .collect()
        })
        .collect();
    Ok(GradientDiversity {
        model_names: models.iter().map(|(n, _)| n.clone()).collect(),
        matrix,
        zero_grad_examples: zero,
        examples_used: used,
    })
}

// ---------------------------------------------------------------------------
// concentration correlation export

/// Class-interaction matrix beta_s * beta_t as CSV: a header row of class
/// indices, then one row per class. Entries are proportional to the magnitude
/// of the label covariance at fixed total concentration.
pub fn beta_correlation_csv(params: &DirichletParams) -> String {
    let k = params.k();
    let corr = correlation_matrix(params);
    let mut out = String::from("class");
    for j in 0..k {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 0..k {
        out.push_str(&i.to_string());
        for j in 0..k {
            out.push_str(&format!(",{}", corr.data()[i * k + j]));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// aggregate report

#[derive(Debug, Clone, Serialize)]
pub struct RobustEntry {
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub loss: AttackLoss,
    pub accuracy: f64,
}

/// Everything the evaluation run measured. Deliberately contains no wall-clock
/// fields so identical seeds yield byte-identical serialized reports.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub examples: usize,
    pub architecture: Architecture,
    pub width_factor: usize,
    pub num_classes: usize,
    pub clean_accuracy: f64,
    pub robust: Vec<RobustEntry>,
    pub invariance: Vec<InvarianceEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset, attacks: &[AttackSpec]) -> Result<EvalReport> {
    let mut robust = Vec::with_capacity(attacks.len());
    for spec in attacks {
        robust.push(RobustEntry {
            epsilon: spec.epsilon,
            steps: spec.steps,
            restarts: spec.restarts,
            loss: spec.loss,
            accuracy: robust_accuracy(model, dataset, spec)?,
        });
    }
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        examples: dataset.len(),
        architecture: model.spec.architecture,
        width_factor: model.spec.width_factor,
        num_classes: model.spec.num_classes,
        clean_accuracy: accuracy(model, dataset)?,
        robust,
        invariance: invariance_suite(model, dataset)?,
    })
}

// ---------------------------------------------------------------------------
// runtime comparison

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeEntry {
    pub mode: String,
    pub seconds: f64,
    /// seconds divided by the natural-training baseline's seconds
    pub ratio_to_natural: f64,
}

/// Train each mode from scratch on the same data and budget, timing the runs.
/// The first natural mode in `modes` (or an implicit one) is the ratio
/// baseline.
pub fn runtime_benchmark(
    dataset: &Dataset,
    modes: &[VicinityMode],
    base: &TrainConfig,
) -> Result<Vec<RuntimeEntry>> {
    let mut timed: Vec<(String, f64)> = Vec::with_capacity(modes.len());
    let mut natural = None;
    for mode in modes {
        let mut config = base.clone();
        config.mode = mode.clone();
        let started = std::time::Instant::now();
        train(dataset, &config)?;
        let secs = started.elapsed().as_secs_f64();
        if natural.is_none() && matches!(mode, VicinityMode::Natural) {
            natural = Some(secs);
        }
        timed.push((mode.name().to_string(), secs));
    }
    let baseline = match natural {
        Some(s) => s,
        None => {
            let mut config = base.clone();
            config.mode = VicinityMode::Natural;
            let started = std::time::Instant::now();
            train(dataset, &config)?;
            started.elapsed().as_secs_f64()
        }
    };
    Ok(timed
        .into_iter()
        .map(|(mode, seconds)| RuntimeEntry {
            mode,
            seconds,
            ratio_to_natural: seconds / baseline,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::{build_model, ModelSpec};

    fn blob_model(seed: u64) -> (Model, Dataset) {
        let ds = synth_blobs(3, 10, 16, 5.0, 0.05, 3).unwrap();
        let spec = ModelSpec {
            architecture: Architecture::Mlp,
            width_factor: 1,
            input_shape: ds.example_shape(),
            num_classes: 3,
        };
        (build_model(&spec, seed).unwrap(), ds)
    }

    #[test]
    fn zero_epsilon_robust_accuracy_is_clean_accuracy() {
        let (model, ds) = blob_model(1);
        let clean = accuracy(&model, &ds).unwrap();
        let spec = AttackSpec::pgd(0.0, 10, 0);
        assert_eq!(robust_accuracy(&model, &ds, &spec).unwrap(), clean);
    }

    #[test]
    fn attack_never_raises_accuracy() {
        let (model, ds) = blob_model(1);
        let clean = accuracy(&model, &ds).unwrap();
        let spec = AttackSpec::pgd(0.1, 10, 0);
        assert!(robust_accuracy(&model, &ds, &spec).unwrap() <= clean);
    }

    #[test]
    fn rotation_zero_is_identity_and_quarter_turn_is_exact() {
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f64 / 10.0).collect()).unwrap();
        assert_eq!(rotate(&x, 0.0).unwrap(), x);
        // 90 degrees maps grid points onto grid points on an odd-sized image
        let r = rotate(&x, 90.0).unwrap();
        let expect = [0.2, 0.5, 0.8, 0.1, 0.4, 0.7, 0.0, 0.3, 0.6];
        for (got, want) in r.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rotation_fills_out_of_frame_with_zero() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let r = rotate(&x, 45.0).unwrap();
        // corners rotate partly out of frame, dragging mass below 1
        assert!(r.data().iter().sum::<f64>() < 4.0);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn brightness_and_contrast_arithmetic() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![0.0, 0.2, 0.5, 0.9]).unwrap();
        let b = brighten(&x);
        assert_eq!(b.data(), &[0.0, 0.30000000000000004, 0.75, 1.0]);
        let c = contrast(&x).unwrap();
        let m = 0.4;
        for (got, &orig) in c.data().iter().zip(x.data()) {
            assert!((got - (m + 2.0 * (orig - m)).clamp(0.0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn grayscale_averages_channels_and_skips_mono() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.5; 4]).unwrap();
        assert!(grayscale(&x).unwrap().is_none());
        let rgb = Tensor::new(
            vec![1, 3, 1, 2],
            vec![0.0, 0.3, 0.6, 0.6, 0.9, 0.9],
        )
        .unwrap();
        let g = grayscale(&rgb).unwrap().unwrap();
        for ci in 0..3 {
            assert!((g.data()[ci * 2] - 0.5).abs() < 1e-12);
            assert!((g.data()[ci * 2 + 1] - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn invariance_suite_marks_grayscale_skipped_on_mono_data() {
        let (model, ds) = blob_model(2);
        let entries = invariance_suite(&model, &ds).unwrap();
        assert_eq!(entries.len(), 4);
        let gray = entries.iter().find(|e| e.transform == "grayscale").unwrap();
        assert!(gray.accuracy.is_none());
        for e in entries.iter().filter(|e| e.transform != "grayscale") {
            assert!(e.accuracy.is_some());
        }
    }

    #[test]
    fn landscape_center_is_base_loss_and_shape_matches() {
        let (model, ds) = blob_model(3);
        let ds = ds.take(6).unwrap();
        let scape = loss_landscape(&model, &ds, 0.1, 4, 9).unwrap();
        assert_eq!(scape.grid.len(), 5);
        assert!(scape.grid.iter().all(|r| r.len() == 5));
        let base = ce_loss(&model, &ds.images, &ds.labels).unwrap();
        assert!((scape.grid[2][2] - base).abs() < 1e-12);
        assert!(scape.range() >= 0.0);
        assert_eq!(scape.to_csv().lines().count(), 5);
    }

    #[test]
    fn landscape_is_deterministic_in_seed() {
        let (model, ds) = blob_model(3);
        let ds = ds.take(4).unwrap();
        let a = loss_landscape(&model, &ds, 0.05, 3, 7).unwrap();
        let b = loss_landscape(&model, &ds, 0.05, 3, 7).unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn gradient_diversity_self_twin_and_negated_twin() {
        let (model, ds) = blob_model(4);
        let ds = ds.take(6).unwrap();

        // a model against a copy of itself: cosine exactly 1 on every example
        let pair = [("a".to_string(), model.clone()), ("b".to_string(), model.clone())];
        let d = gradient_diversity(&pair, &ds).unwrap();
        assert_eq!(d.matrix[0][0], None);
        assert!((d.matrix[0][1].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(d.matrix[0][1], d.matrix[1][0]);

        // negating the output layer flips every logit; the gradients are the
        // negation up to the softmax evaluated at flipped logits, so the
        // cosine sits just shy of -1
        let mut negated = model.clone();
        for (name, p) in negated.params.iter_mut() {
            if name.starts_with("fc2") {
                let flipped: Vec<f64> = p.data().iter().map(|v| -v).collect();
                *p = Tensor::new(p.shape().to_vec(), flipped).unwrap();
            }
        }
        let pair = [("a".to_string(), model.clone()), ("neg".to_string(), negated)];
        let d = gradient_diversity(&pair, &ds).unwrap();
        assert!(d.matrix[0][1].unwrap() < -0.99, "{:?}", d.matrix[0][1]);

        let csv = d.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains(",na"));
    }

    #[test]
    fn correlation_csv_shape_and_diagonal() {
        let params = DirichletParams::from_beta(&[0.5, 1.0, 2.0]).unwrap();
        let csv = beta_correlation_csv(&params);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "class,0,1,2");
        let beta = [0.5, 1.0, 2.0];
        for (i, line) in lines[1..].iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 4);
            for j in 0..3 {
                let got: f64 = cells[1 + j].parse().unwrap();
                assert!((got - beta[i] * beta[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn report_is_deterministic_and_timing_free() {
        let (model, ds) = blob_model(5);
        let attacks = [AttackSpec::pgd(0.05, 3, 0)];
        let a = evaluate(&model, &ds, &attacks).unwrap().to_json().unwrap();
        let b = evaluate(&model, &ds, &attacks).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("seconds"));
    }
}
