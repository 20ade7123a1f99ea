use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Tensor with i.i.d. Normal(0, std) entries.
pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::from_parts(shape, data)
}
