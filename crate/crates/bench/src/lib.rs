//! Inputs shared by the benchmarks.

use lungvit_core::metrics::PredictionSet;
use lungvit_core::{Rng, Tensor, ViTConfig};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), || rng.uniform_range(-1.0, 1.0))
}

/// Batch of images shaped for `cfg`.
pub fn images(cfg: &ViTConfig, batch: usize, seed: u64) -> Tensor {
    random_tensor(&[batch, cfg.in_channels, cfg.image_size, cfg.image_size], seed)
}

pub fn prediction_set(n: usize, classes: usize, seed: u64) -> PredictionSet {
    let mut rng = Rng::new(seed);
    let mut scores = Vec::with_capacity(n * classes);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        scores.extend(raw.iter().map(|r| r / total));
        labels.push((rng.uniform() * classes as f64) as usize);
    }
    PredictionSet::new(scores, labels, classes).expect("rows are normalized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_have_requested_shapes() {
        let cfg = ViTConfig::tiny(3);
        assert_eq!(images(&cfg, 2, 0).shape(), [2, 1, 32, 32]);
        let p = prediction_set(10, 4, 1);
        assert_eq!((p.len(), p.classes()), (10, 4));
    }
}
