//! Fixtures shared by the criterion benches.

use ndarray::{Array2, Array4};
use uniedit_core::{Denoiser, DenoiserConfig, LatentVideo};

/// Default toy model (8 frames, 5 attention layers per kind).
pub fn toy_model() -> Denoiser {
    Denoiser::new(DenoiserConfig::default()).expect("default config is valid")
}

/// Seeded `(8, 4, side, side)` latent.
pub fn latent(side: usize, seed: u64) -> LatentVideo {
    LatentVideo::gaussian((8, 4, side, side), seed).expect("finite noise")
}

/// Deterministic pseudo-random matrix in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, salt: u32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let h = ((r * 7919 + c * 104_729) as u32 ^ salt).wrapping_mul(2_654_435_761);
        (h >> 8) as f32 / (1u32 << 23) as f32 - 1.0
    })
}

/// Smooth texture panned by `speed` pixels per frame, `(frames, 3, n, n)`.
pub fn panning_video(frames: usize, n: usize, speed: f64) -> Array4<f32> {
    Array4::from_shape_fn((frames, 3, n, n), |(t, _, y, x)| {
        let x = x as f64 - speed * t as f64;
        let y = y as f64;
        ((0.31 * x + 0.17 * y).sin() + (-0.12 * x + 0.27 * y + 1.3).sin()) as f32 / 2.0
    })
}
