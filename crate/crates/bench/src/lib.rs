//! Fixtures shared by the benchmarks.

use panmorph::config::TrainConfig;
use panmorph::deformation::DeformationField;
use panmorph::segnet::{SegConfig, SegModel};
use panmorph::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic `(1, channels, h, w)` input in `[0, 1)`.
pub fn image(channels: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    Tensor::new((0..channels * h * w).map(|_| rng.random::<f64>()).collect(), &[1, channels, h, w])
}

/// Smooth field with displacements up to `amplitude` pixels.
pub fn field(h: usize, w: usize, amplitude: f64) -> DeformationField {
    DeformationField::from_fn(h, w, |x, y| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        (
            amplitude * (std::f64::consts::TAU * v).sin(),
            amplitude * (std::f64::consts::TAU * u).cos(),
        )
    })
}

/// Segmentation model at the default desk widths.
pub fn seg_model() -> SegModel {
    let cfg = TrainConfig::default();
    SegModel::new(SegConfig::from_train(&cfg), &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config")
}
