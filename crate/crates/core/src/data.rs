//! Dataset ingestion and minibatching.
//!
//! Supports the IDX image/label format (big-endian magic 0x00000803 /
//! 0x00000801), the CIFAR-10 binary layout (3073-byte records) and seeded
//! synthetic Gaussian blob datasets for oracle-checkable experiments.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Labeled image dataset with pixels in [0, 1], NCHW layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: String) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!(
                "dataset images must be NCHW, got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::Data("dataset must contain at least one example".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "image/label count mismatch: {} images vs {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Data("pixel outside [0, 1]".into()));
        }
        Ok(Dataset { images, labels, num_classes, name })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// [C, H, W] shape of one example.
    pub fn example_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Dataset restricted to the first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let sub = self.subset(&(0..n).collect::<Vec<_>>());
        Dataset::new(sub.0, sub.1, self.num_classes, self.name.clone())
    }

    /// Deterministic shuffled subsample of `n` examples; unlike `take` it
    /// draws from the whole dataset, so class-ordered data stays balanced.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = stream_rng(seed, Stream::Eval, 1);
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx.truncate(n.min(self.len()));
        let (images, labels) = self.subset(&idx);
        Dataset::new(images, labels, self.num_classes, self.name.clone())
    }

    fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let ex: usize = self.example_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * ex);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * ex..(i + 1) * ex]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend(self.example_shape());
        (Tensor::new(shape, data).expect("subset shape"), labels)
    }
}

fn read_be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

/// Load an IDX image/label pair; pixels scaled by 1/255, single channel.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lbl = fs::read(labels_path)?;

    let magic = read_be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(&img, 4)? as usize;
    let h = read_be_u32(&img, 8)? as usize;
    let w = read_be_u32(&img, 12)? as usize;
    let pixels = img
        .get(16..)
        .ok_or_else(|| Error::Data("truncated IDX image file".into()))?;
    if pixels.len() != n * h * w {
        return Err(Error::Data(format!(
            "IDX image payload has {} bytes, expected {}",
            pixels.len(),
            n * h * w
        )));
    }

    let lmagic = read_be_u32(&lbl, 0)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad IDX label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let ln = read_be_u32(&lbl, 4)? as usize;
    if ln != n {
        return Err(Error::Data(format!(
            "image/label count mismatch: {n} images vs {ln} labels"
        )));
    }
    let labels_raw = lbl
        .get(8..)
        .ok_or_else(|| Error::Data("truncated IDX label file".into()))?;
    if labels_raw.len() != n {
        return Err(Error::Data(format!(
            "IDX label payload has {} bytes, expected {n}",
            labels_raw.len()
        )));
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1).max(2);
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    Dataset::new(images, labels, num_classes, "idx".into())
}

/// Load CIFAR-10 binary records (1 label byte + 3072 pixel bytes each),
/// keeping at most `max_n` records.
pub fn load_cifar_bin(path: &Path, max_n: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR binary length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Data("max_n = 0 would produce an empty dataset".into()));
    }
    let n = (bytes.len() / CIFAR_RECORD).min(max_n);
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD).take(n) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], data)?;
    Dataset::new(images, labels, 10, "cifar10".into())
}

/// Synthetic isotropic Gaussian clusters, clipped to [0,1] and reshaped to a
/// near-square single-channel grid. Deterministic in `seed`.
pub fn synth_blobs(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 || separation < 0.0 || sigma <= 0.0 || n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "synth_blobs needs K >= 2, dim >= 2, separation >= 0, sigma > 0, n_per_class >= 1".into(),
        ));
    }
    let (d1, d2) = factor_grid(dim).ok_or_else(|| {
        Error::InvalidArgument(format!("dim {dim} is not factorable into a d1 x d2 grid"))
    })?;

    let mut rng = stream_rng(seed, Stream::Data, 0);
    // class means: 0.5 + unit directions scaled so neighboring means sit
    // `separation * sigma` apart in l2
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v = 0.5 + *v / norm * separation * sigma / 2.0_f64.sqrt();
        }
        means.push(dir);
    }

    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        for _ in 0..n_per_class {
            for &m in &means[k] {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((m + sigma * noise).clamp(0.0, 1.0));
            }
            labels.push(k);
        }
    }
    let images = Tensor::new(vec![n, 1, d1, d2], data)?;
    Dataset::new(images, labels, num_classes, "blobs".into())
}

fn factor_grid(dim: usize) -> Option<(usize, usize)> {
    let mut best = None;
    for d1 in 1..=dim {
        if d1 * d1 > dim {
            break;
        }
        if dim % d1 == 0 {
            best = Some((d1, dim / d1));
        }
    }
    // reject degenerate 1 x dim strips for dim that has no square-ish factorization
    match best {
        Some((1, _)) if dim > 3 => None,
        other => other,
    }
}

/// A minibatch: images plus labels both as indices and simplex rows.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Tensor,
    /// N x K one-hot (or softened downstream) label distributions
    pub label_dist: Tensor,
    pub label_idx: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.label_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_idx.is_empty()
    }
}

/// One fresh shuffled pass over the dataset; the permutation is a pure
/// function of (master seed, epoch index). Final short batch included.
pub fn minibatch_iter(
    dataset: &Dataset,
    batch_size: usize,
    master_seed: u64,
    epoch: u64,
) -> Result<Vec<LabeledBatch>> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch_size {batch_size} out of range for {} examples",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = stream_rng(master_seed, Stream::EpochShuffle, epoch);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let k = dataset.num_classes;
    let mut batches = Vec::with_capacity(dataset.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let (images, label_idx) = dataset.subset(chunk);
        let mut dist = vec![0.0; label_idx.len() * k];
        for (i, &y) in label_idx.iter().enumerate() {
            dist[i * k + y] = 1.0;
        }
        batches.push(LabeledBatch {
            images,
            label_dist: Tensor::new(vec![label_idx.len(), k], dist)?,
            label_idx,
        });
    }
    Ok(batches)
}
