use rand::Rng;

use crate::tensor::Tensor;

/// Half-width of the Glorot uniform interval for a weight of this shape.
///
/// The last axis is the fan-out and the product of the others the fan-in;
/// a rank-1 shape uses its length for both.
pub fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [d] => (*d, *d),
        [rest @ .., last] => (rest.iter().product(), *last),
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot (Xavier) uniform initialization.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let bound = glorot_bound(shape);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
