//! Weight initialization. Random draws happen in f64 and are cast to the
//! scalar type, so a given seed produces the same stream for f32 and f64.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in), the ReLU gain.
pub fn kaiming_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("len matches shape")
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::filled(shape, T::one())
}
