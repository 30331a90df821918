//! Fixtures shared by the criterion benchmarks.

use gcldr_core::model::{build_bundle, BundleConfig, ModelBundle};
use gcldr_core::Tensor;

/// Deterministic pseudo-random matrix with entries in `[-1, 1]`.
pub fn filled(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| {
            let h = (i as u64 ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
            (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

pub fn labels(rows: usize, classes: usize) -> Vec<usize> {
    (0..rows).map(|i| (i * 7 + 3) % classes).collect()
}

/// Benchmark-sized model: `d = 20`, six classes, two latent domains.
pub fn bundle(mapping_width: usize, feature_width: usize) -> ModelBundle {
    let cfg = BundleConfig { mapping_width, feature_width, ..BundleConfig::new(20, 6, 2) };
    build_bundle(&cfg).expect("valid bundle config")
}
