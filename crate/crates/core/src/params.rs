//! Parameter-group plumbing shared by every learned component.

use rand::Rng;

use crate::tensor::Tensor;

/// A group of learned tensors with a stable order.
///
/// The order of [`Parameters::named`] and [`Parameters::tensors_mut`] must agree;
/// optimizers and checkpoints rely on it.
pub trait Parameters {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
