//! Inputs shared by the criterion benches.

use candle_core::{DType, Device, Tensor};
use glore_mtl::labels::{LabelMap, NUM_INTERACTIONS, NUM_SEG_CLASSES};

/// Normal tensor of `shape`.
pub fn noise(shape: &[usize], dtype: DType) -> Tensor {
    Tensor::randn(0f32, 1.0, shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(dtype))
        .expect("cpu tensor")
}

/// Label map with a repeating stripe pattern over every class.
pub fn stripes(h: usize, w: usize, shift: usize) -> LabelMap {
    let data = (0..h * w)
        .map(|i| (((i % w) / 7 + i / w / 5 + shift) % NUM_SEG_CLASSES) as u8)
        .collect();
    LabelMap::new(1, h, w, data).expect("consistent dims")
}

/// Deterministic pseudo-random score rows and targets for `edges` edges.
pub fn score_table(edges: usize) -> (Vec<[f64; NUM_INTERACTIONS]>, Vec<[u8; NUM_INTERACTIONS]>) {
    let mut x: u64 = 0x9e37_79b9;
    let mut next = || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..edges)
        .map(|_| {
            let s = std::array::from_fn(|_| next());
            let t = std::array::from_fn(|_| (next() < 0.3) as u8);
            (s, t)
        })
        .unzip()
}
