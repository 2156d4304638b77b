//! Desk-scale laboratory for vicinal robust training: a small reverse-mode
//! autodiff engine, MLP/CNN classifiers, a family of vicinal losses built
//! from Gaussian augmentation, Mixup and learned Dirichlet label smoothing,
//! PGD attacks, and an evaluation suite, all on f64 with seeded determinism.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod dirichlet;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vicinity;

pub use error::{Error, Result};
pub use tensor::Tensor;
