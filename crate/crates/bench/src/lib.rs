//! Shared fixtures for the criterion benchmarks.

use deepid::net::ScaleConfig;
use deepid::tensor::uniform_tensor;
use deepid::{Rng, Tensor};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    uniform_tensor(shape, -1.0, 1.0, &mut Rng::new(seed)).expect("non-empty shape")
}

/// Roughly the network scale the default pipeline trains.
pub fn desk_scale() -> ScaleConfig {
    ScaleConfig { input_h: 16, input_w: 16, widths: [8, 12, 16, 24], feature_dim: 32, head_dim: 16, ..ScaleConfig::default() }
}

/// `ids × per_id` features drawn from identity-plus-noise clusters.
pub fn clustered_features(dim: usize, ids: usize, per_id: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = Rng::new(seed);
    let mut feats = Vec::with_capacity(ids * per_id);
    let mut labels = Vec::with_capacity(ids * per_id);
    for id in 0..ids {
        let centre: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for _ in 0..per_id {
            feats.push(Tensor::vector(centre.iter().map(|c| c + 0.5 * rng.normal()).collect()));
            labels.push(id);
        }
    }
    (feats, labels)
}
