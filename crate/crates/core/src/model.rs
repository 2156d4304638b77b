//! Desk-scale classifiers: an MLP and a small CNN, both with a width knob.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::{NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Cnn,
}

/// Deterministic description of a model; layer dimensions derive from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub width_factor: usize,
    /// [C, H, W] of one example
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_factor < 1 {
            return Err(Error::InvalidArgument("width_factor must be >= 1".into()));
        }
        if self.input_shape.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "input_shape must be [C, H, W], got {:?}",
                self.input_shape
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Named parameter shapes in forward order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width_factor;
        let k = self.num_classes;
        match self.architecture {
            Architecture::Mlp => {
                let hidden = 128 * w;
                vec![
                    ("fc1.weight".into(), vec![self.input_dim(), hidden]),
                    ("fc1.bias".into(), vec![hidden]),
                    ("fc2.weight".into(), vec![hidden, k]),
                    ("fc2.bias".into(), vec![k]),
                ]
            }
            Architecture::Cnn => {
                let c = self.input_shape[0];
                let (c1, c2) = (8 * w, 16 * w);
                vec![
                    ("conv1.weight".into(), vec![c1, c, 3, 3]),
                    ("conv1.bias".into(), vec![c1]),
                    ("conv2.weight".into(), vec![c2, c1, 3, 3]),
                    ("conv2.bias".into(), vec![c2]),
                    ("fc.weight".into(), vec![c2, k]),
                    ("fc.bias".into(), vec![k]),
                ]
            }
        }
    }
}

/// A model is its spec plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<(String, Tensor)>,
}

/// Fan-in-scaled uniform init, biases zero; deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::ModelInit, 0);
    let mut params = Vec::new();
    for (name, shape) in spec.parameter_shapes() {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; numel]
        } else {
            let fan_in: usize = match shape.len() {
                2 => shape[0],
                4 => shape[1] * shape[2] * shape[3],
                _ => shape.iter().product(),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Model { spec: spec.clone(), params })
}

impl Model {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != 4 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                lhs: x.shape().to_vec(),
                rhs: self.spec.input_shape.clone(),
            });
        }
        Ok(x.shape()[0])
    }

    /// Forward pass on a tape. Parameters are registered as leaves when
    /// `record_params` is set; the returned node ids parallel `self.params`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        record_params: bool,
    ) -> Result<(Tensor, Vec<NodeId>)> {
        let n = self.check_input(x)?;
        let recorded: Vec<Tensor> = self
            .params
            .iter()
            .map(|(_, p)| if record_params { tape.leaf(p) } else { p.detached() })
            .collect();
        let ids: Vec<NodeId> = recorded.iter().filter_map(|t| t.node()).collect();

        let logits = match self.spec.architecture {
            Architecture::Mlp => {
                let flat = tape.reshape(x, vec![n, self.spec.input_dim()])?;
                let h = tape.matmul(&flat, &recorded[0])?;
                let h = tape.add(&h, &recorded[1])?;
                let h = tape.relu(&h);
                let o = tape.matmul(&h, &recorded[2])?;
                tape.add(&o, &recorded[3])?
            }
            Architecture::Cnn => {
                let h = tape.conv2d(x, &recorded[0])?;
                let h = tape.add(&h, &recorded[1])?;
                let h = tape.relu(&h);
                let h = tape.conv2d(&h, &recorded[2])?;
                let h = tape.add(&h, &recorded[3])?;
                let h = tape.relu(&h);
                let pooled = tape.global_avg_pool(&h)?;
                let o = tape.matmul(&pooled, &recorded[4])?;
                tape.add(&o, &recorded[5])?
            }
        };
        Ok((logits, ids))
    }

    /// Detached forward pass: logits only, nothing recorded.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut scratch = Tape::new();
        let (logits, _) = self.forward_on(&mut scratch, &x.detached(), false)?;
        Ok(logits)
    }

    /// Argmax class predictions. Inference runs in fixed-size chunks so the
    /// intermediate activations stay bounded regardless of the batch size.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        const CHUNK: usize = 256;
        let n = self.check_input(x)?;
        let ex: usize = self.spec.input_shape.iter().product();
        let k = self.spec.num_classes;
        let mut preds = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut shape = vec![end - start];
            shape.extend_from_slice(&self.spec.input_shape);
            let chunk = Tensor::new(shape, x.data()[start * ex..end * ex].to_vec())?;
            let logits = self.logits(&chunk)?;
            preds.extend(logits.data().chunks(k).map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            }));
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec() -> ModelSpec {
        ModelSpec {
            architecture: Architecture::Mlp,
            width_factor: 1,
            input_shape: vec![1, 28, 28],
            num_classes: 10,
        }
    }

    #[test]
    fn mlp_shapes_match_spec() {
        let shapes = mlp_spec().parameter_shapes();
        assert_eq!(shapes[0].1, vec![784, 128]);
        assert_eq!(shapes[2].1, vec![128, 10]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = build_model(&mlp_spec(), 3).unwrap();
        let b = build_model(&mlp_spec(), 3).unwrap();
        for ((_, pa), (_, pb)) in a.params.iter().zip(&b.params) {
            assert_eq!(pa, pb);
        }
        let c = build_model(&mlp_spec(), 4).unwrap();
        assert_ne!(a.params[0].1, c.params[0].1);
    }

    #[test]
    fn width_scales_channels() {
        let spec = ModelSpec {
            architecture: Architecture::Cnn,
            width_factor: 4,
            input_shape: vec![1, 8, 8],
            num_classes: 10,
        };
        let shapes = spec.parameter_shapes();
        assert_eq!(shapes[0].1[0], 32); // 4x the width-1 channel count of 8
        assert_eq!(shapes[2].1[0], 64);
    }

    #[test]
    fn forward_shape_and_bias_effect() {
        let spec = ModelSpec {
            architecture: Architecture::Cnn,
            width_factor: 1,
            input_shape: vec![1, 8, 8],
            num_classes: 4,
        };
        let mut model = build_model(&spec, 0).unwrap();
        let x = Tensor::zeros(vec![2, 1, 8, 8]);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        // zero input, zero biases -> zero logits
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let idx = model.params.iter().position(|(n, _)| n == "fc.bias").unwrap();
        model.params[idx].1 = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(model.predict(&x).unwrap(), vec![3, 3]);
    }
}
