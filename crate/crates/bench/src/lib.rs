//! Fixtures shared by the kernel benchmarks in `benches/`.

use adaagg_core::data::{synthetic_blobs, BlobSpec};
use adaagg_core::{Batch, ImageDims, Model, ModelSpec, ParamVector};

/// MNIST-shaped synthetic batch.
pub fn mnist_like(n: usize, seed: u64) -> Batch {
    let spec = BlobSpec { dims: ImageDims::new(1, 28, 28), classes: 10, radius: 0.35, sigma: 0.1 };
    synthetic_blobs(n, &spec, seed).expect("valid blob spec")
}

pub fn small_cnn() -> Model {
    ModelSpec::small_cnn(ImageDims::new(1, 28, 28), 10).build().expect("valid spec")
}

/// `n` parameter-shaped vectors with deterministic pseudo-random entries.
pub fn updates(n: usize, len: usize) -> Vec<ParamVector> {
    (0..n).map(|k| ParamVector((0..len).map(|j| ((j * 31 + k * 17) % 97) as f64 / 97.0 - 0.5).collect())).collect()
}
