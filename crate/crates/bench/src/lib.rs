//! Input fixtures for the kernel benchmarks in `benches/`.

use dynprec::mnist::IdxImages;
use dynprec::rng::substream;
use dynprec::{Dataset, Tensor};
use rand::Rng;

/// Uniform values in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut rng = substream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("nonempty shape")
}

/// Random 28x28 images with random labels.
pub fn synthetic_mnist(n: usize, seed: u64) -> Dataset {
    let mut rng = substream(seed, &[]);
    let pixels = (0..n * 784).map(|_| rng.random()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    Dataset::new(IdxImages { rows: 28, cols: 28, pixels }, labels).expect("consistent sizes")
}
