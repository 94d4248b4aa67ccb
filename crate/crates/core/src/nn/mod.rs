//! Minimal reverse-mode autodiff over dense f32 tensors.
//!
//! Only the handful of layer kinds the toy denoiser, autoencoder and
//! discriminator need are provided. Every kernel fixes the accumulation
//! order of each output element, so results are bitwise identical
//! regardless of the rayon thread count.

mod graph;
mod kernels;
mod params;

pub use graph::{Grads, Graph, Var};
pub use params::{Adam, AdamConfig, ParamGroup, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(&[1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }
}
