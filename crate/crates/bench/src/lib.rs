//! Shared fixtures for the criterion benchmarks.

use mitdet_core::data::{render_image, SyntheticConfig};
use mitdet_core::localize::Patch;
use mitdet_core::{Point, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One default-sized synthetic image.
pub fn synthetic_image(seed: u64) -> RgbImage {
    let cfg = SyntheticConfig {
        seed,
        ..Default::default()
    };
    render_image(&cfg, 0).expect("default synthetic config is valid").image
}

/// `n` patches of side `size` cut from a synthetic image on a grid.
pub fn patches(n: usize, size: usize, seed: u64) -> Vec<Patch> {
    let img = synthetic_image(seed);
    let step = (img.width() - size) / 8;
    (0..n)
        .map(|i| {
            let (cx, cy) = (size / 2 + (i % 8) * step, size / 2 + (i / 8 % 8) * step);
            Patch {
                pixels: mitdet_core::localize::crop_at(&img, cx, cy, size),
                source_image_id: "bench".into(),
                center: (cx, cy),
            }
        })
        .collect()
}

/// `n` uniform points in a `side`×`side` square.
pub fn random_points(n: usize, side: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..side), rng.random_range(0.0..side)))
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
