use rand::Rng;

use crate::diffcore::Tensor;
use crate::scalar::Scalar;

/// Kaiming-uniform (fan-in, ReLU gain): `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
