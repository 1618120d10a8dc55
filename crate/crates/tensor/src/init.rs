//! Seeded weight initializers.

use rand::Rng;

use crate::element::Element;
use crate::tensor::Tensor;

fn uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape, data).expect("initializer shape")
}

/// U(-√(6/fan_in), √(6/fan_in)); for layers followed by a ReLU.
pub fn he_uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// U(-√(6/(fan_in+fan_out)), +…).
pub fn glorot_uniform<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

/// Fan-in/fan-out of a `[kh, kw, in, out]` kernel or `[in, out]` matrix.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [i, o] => (*i, *o),
        [kh, kw, i, o] => (kh * kw * i, kh * kw * o),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}
