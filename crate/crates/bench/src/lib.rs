//! Shared fixtures for the benchmarks.

use pointdet_core::detector::GtBox;
use pointdet_core::synth::{render_sample, SynthConfig};
use pointdet_core::Tensor;

/// Deterministic synthetic scenes with their boxes.
pub fn scenes(size: usize, n: usize) -> Vec<(Tensor, Vec<GtBox>)> {
    let cfg = SynthConfig {
        size,
        seed: 11,
        ..SynthConfig::default()
    };
    (0..n as u64)
        .map(|i| {
            let s = render_sample(&cfg, i).expect("valid synth config");
            let gts = s.boxes.iter().map(|b| GtBox::new(b.bbox, b.label)).collect();
            (s.image, gts)
        })
        .collect()
}
