//! Seeded parameter initialisation.

use rand::Rng;

use super::Tensor;

/// Uniform fan-in scaled initialisation, `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, (6.0 / fan_in.max(1) as f64).sqrt())
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
