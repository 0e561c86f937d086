//! Dense row-major f64 tensor.
//!
//! The passive value type: parameter stores hold these, tapes copy them in
//! as leaves. Everything is 64-bit so finite-difference checks stay tight.

use crate::error::{shape_err, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given std, mean zero.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn frozen_tensor_never_holds_grad() {
        let mut t = Tensor::zeros(&[4]);
        t.set_requires_grad(true);
        t.set_grad(vec![1.0; 4]);
        assert!(t.grad().is_some());
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert!(strides(&[]).is_empty());
    }
}
