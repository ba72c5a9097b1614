//! Deterministic fixtures shared by the benchmarks.

use lorafuse_core::autograd::Tensor;
use lorafuse_core::backbone::{BackboneConfig, BackboneWeights};
use lorafuse_core::multitask::{TaskHead, TaskKind};
use lorafuse_core::{LoraAdapter, LoraConfig};

/// Cheap hash-like fill in `[-1, 1)`.
pub fn filled(shape: &[usize], salt: u32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        let h = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(salt.wrapping_mul(40_503));
        (h >> 8) as f32 / (1u32 << 23) as f32 - 1.0
    })
}

pub fn desk_backbone() -> BackboneWeights {
    BackboneWeights::init(&BackboneConfig::desk_scale(), 0).expect("desk config is valid")
}

pub fn images(config: &BackboneConfig, n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|i| filled(&[config.channels, config.image_size, config.image_size], i as u32))
        .collect()
}

/// Adapter with non-zero `B`, so the low-rank path does real work.
pub fn adapter(config: &BackboneConfig, rank: usize, salt: u32) -> LoraAdapter {
    let mut a = LoraAdapter::init(&LoraConfig::new(rank), config, format!("t{salt}"), salt as u64)
        .expect("rank fits the backbone");
    for (i, f) in a.factors.values_mut().enumerate() {
        f.b = filled(f.b.shape(), salt + i as u32);
    }
    a
}

pub fn head(config: &BackboneConfig, classes: usize) -> TaskHead {
    TaskHead::init("bench", TaskKind::Classification { num_classes: classes }, config.hidden_dim, 64, 0)
        .expect("valid head")
}
