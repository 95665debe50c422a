//! Fixtures shared by the benchmarks.

use depthformer::config::{ModelConfig, Preset, TrainConfig};
use depthformer::data::{synthetic_dataset, Sample};
use depthformer::Tensor;

/// Tiny model with a small training batch at `side`×`side`.
pub fn tiny_setup(side: usize, batch: usize) -> (ModelConfig, TrainConfig, Vec<Sample>) {
    let model = ModelConfig::preset(Preset::Tiny);
    let train = TrainConfig { batch_size: batch, crop_h: side, crop_w: side, ..TrainConfig::preset(Preset::Tiny) };
    let data = synthetic_dataset(batch, side, side, 0, model.d_min, model.d_max).expect("valid synthetic size");
    (model, train, data)
}

/// Deterministic `[1, 3, h, w]` input.
pub fn input(h: usize, w: usize) -> Tensor<f32> {
    let data = (0..3 * h * w).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect();
    Tensor::from_vec(&[1, 3, h, w], data).expect("sizes match")
}
