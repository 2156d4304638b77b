//! Dense n-dimensional arrays of f64 in row-major order.
//!
//! A `Tensor` detached from any tape is a plain immutable value. When an
//! operation on a [`crate::tape::Tape`] produces it, the tensor additionally
//! carries the id of the tape node that computed it, which is what the
//! backward pass keys on.

use crate::error::{Error, Result};

/// Handle into the active computation record.
pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) node: Option<NodeId>,
}

impl PartialEq for Tensor {
    /// Value equality; tape attachment is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape product != data length {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    /// Detached copy: same values, no tape attachment.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Reinterpret the flat data under a new shape of equal size.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("target size != {}", self.data.len()),
            });
        }
        Ok(Tensor { shape, data: self.data.clone(), node: None })
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Tensor {
        self.node = Some(node);
        self
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(4.5);
        assert!(t.is_scalar());
        assert_eq!(t.scalar_value().unwrap(), 4.5);
        assert!(Tensor::zeros(vec![2]).scalar_value().is_err());
    }

    #[test]
    fn detached_drops_node() {
        let mut t = Tensor::scalar(1.0);
        t.node = Some(3);
        assert_eq!(t.detached().node(), None);
    }
}
