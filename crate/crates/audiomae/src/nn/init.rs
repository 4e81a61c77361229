//! Weight initialization helpers. All draws go through a caller-provided
//! seeded RNG so parameter init is reproducible given the seed.

use rand::Rng;

use super::tensor::{Element, Tensor};

/// Standard normal via Box-Muller; rejection keeps draws within ±2σ after
/// scaling, the usual truncation for transformer weight init.
pub fn trunc_normal<E: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        for z in [r * theta.cos(), r * theta.sin()] {
            if z.abs() <= 2.0 && data.len() < n {
                data.push(E::from_f64(z * std));
            }
        }
    }
    Tensor::from_vec(shape, data)
}
