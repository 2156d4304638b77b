//! Checkpoint container: a JSON header (spec, config, seeds) followed by raw
//! little-endian f64 parameter blocks. Metadata stays human-auditable while
//! numerics round-trip exactly; save -> load -> save is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPROUTv1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
    has_beta: bool,
    epoch: usize,
    master_seed: u64,
    /// resolved training configuration, kept verbatim
    config_json: String,
}

/// Model parameters, concentration vector, configuration snapshot and seed
/// lineage, as written to and read from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<(String, Tensor)>,
    pub beta: Option<DirichletParams>,
    pub epoch: usize,
    pub master_seed: u64,
    pub config_json: String,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        beta: Option<&DirichletParams>,
        epoch: usize,
        master_seed: u64,
        config_json: String,
    ) -> Self {
        Checkpoint {
            spec: model.spec.clone(),
            params: model.params.clone(),
            beta: beta.cloned(),
            epoch,
            master_seed,
            config_json,
        }
    }

    pub fn model(&self) -> Model {
        Model { spec: self.spec.clone(), params: self.params.clone() }
    }

    /// Reject checkpoints whose class count does not match the consumer's.
    pub fn expect_classes(&self, k: usize) -> Result<()> {
        if self.spec.num_classes != k {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} classes, expected {k}",
                self.spec.num_classes
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let expected = ckpt.spec.parameter_shapes();
    let actual: Vec<(String, Vec<usize>)> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if expected != actual {
        return Err(Error::Checkpoint(format!(
            "parameter names/shapes {actual:?} do not match the model spec"
        )));
    }
    let header = Header {
        version: VERSION,
        spec: ckpt.spec.clone(),
        params: actual,
        has_beta: ckpt.beta.is_some(),
        epoch: ckpt.epoch,
        master_seed: ckpt.master_seed,
        config_json: ckpt.config_json.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in &ckpt.params {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(beta) = &ckpt.beta {
        for v in beta.log_beta() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?,
    )?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {VERSION})",
            header.version
        )));
    }
    if header.params != header.spec.parameter_shapes() {
        return Err(Error::Checkpoint(
            "parameter list does not match the embedded model spec".into(),
        ));
    }

    let mut off = 12 + hlen;
    let mut read_block = |numel: usize| -> Result<Vec<f64>> {
        let end = off + numel * 8;
        let block = bytes
            .get(off..end)
            .ok_or_else(|| Error::Checkpoint("truncated parameter block".into()))?;
        off = end;
        Ok(block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let mut params = Vec::with_capacity(header.params.len());
    for (name, shape) in &header.params {
        let numel: usize = shape.iter().product();
        params.push((name.clone(), Tensor::new(shape.clone(), read_block(numel)?)?));
    }
    let beta = if header.has_beta {
        Some(DirichletParams::from_log(read_block(header.spec.num_classes)?)?)
    } else {
        None
    };
    if off != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blocks".into()));
    }
    Ok(Checkpoint {
        spec: header.spec,
        params,
        beta,
        epoch: header.epoch,
        master_seed: header.master_seed,
        config_json: header.config_json,
    })
}
