//! Fixed pixel <-> latent mapping standing in for a learned autoencoder.
//!
//! Encoding averages each 2x2 pixel block; latent channels are the block's
//! red, green, blue and luminance. Decoding repeats each latent cell over its
//! block and shifts the colour channels so their luminance matches the
//! fourth channel.

use ndarray::{Array4, Axis};

use crate::denoiser::LatentVideo;
use crate::error::{Error, Result};

/// Spatial downsampling between pixels and latents.
pub const FACTOR: usize = 2;
pub const LATENT_CHANNELS: usize = 4;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
}

/// `(F, 3, H, W)` pixels in `[-1, 1]` to a `(F, 4, H/2, W/2)` latent.
pub fn encode(pixels: &Array4<f32>) -> Result<LatentVideo> {
    let (f, c, h, w) = pixels.dim();
    if c != 3 || h % FACTOR != 0 || w % FACTOR != 0 {
        return Err(Error::Shape(format!(
            "pixels {:?} must have 3 channels and sides divisible by {FACTOR}",
            pixels.dim()
        )));
    }
    let (lh, lw) = (h / FACTOR, w / FACTOR);
    let norm = (FACTOR * FACTOR) as f32;
    let mut z = Array4::<f32>::zeros((f, LATENT_CHANNELS, lh, lw));
    for fi in 0..f {
        for y in 0..lh {
            for x in 0..lw {
                let mut rgb = [0.0f32; 3];
                for (ch, acc) in rgb.iter_mut().enumerate() {
                    for dy in 0..FACTOR {
                        for dx in 0..FACTOR {
                            *acc += pixels[[fi, ch, y * FACTOR + dy, x * FACTOR + dx]];
                        }
                    }
                    *acc /= norm;
                    z[[fi, ch, y, x]] = *acc;
                }
                z[[fi, 3, y, x]] = luma(rgb[0], rgb[1], rgb[2]);
            }
        }
    }
    LatentVideo::new(z)
}

/// Latent back to `(F, 3, 2H, 2W)` pixels clipped to `[-1, 1]`.
pub fn decode(z: &LatentVideo) -> Result<Array4<f32>> {
    let (f, c, h, w) = z.dim();
    if c != LATENT_CHANNELS {
        return Err(Error::Shape(format!("latent has {c} channels, codec expects {LATENT_CHANNELS}")));
    }
    let d = z.data();
    let mut out = Array4::<f32>::zeros((f, 3, h * FACTOR, w * FACTOR));
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (d[[fi, 0, y, x]], d[[fi, 1, y, x]], d[[fi, 2, y, x]]);
                let shift = d[[fi, 3, y, x]] - luma(r, g, b);
                for (ch, v) in [r, g, b].into_iter().enumerate() {
                    let v = (v + shift).clamp(-1.0, 1.0);
                    for dy in 0..FACTOR {
                        for dx in 0..FACTOR {
                            out[[fi, ch, y * FACTOR + dy, x * FACTOR + dx]] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pixel resolution for a latent resolution.
pub fn pixel_size(latent: (usize, usize)) -> (usize, usize) {
    (latent.0 * FACTOR, latent.1 * FACTOR)
}

/// Latent resolution for a pixel resolution.
pub fn latent_size(pixels: (usize, usize)) -> Result<(usize, usize)> {
    if !pixels.0.is_multiple_of(FACTOR) || !pixels.1.is_multiple_of(FACTOR) {
        return Err(Error::Config(format!(
            "resolution {}x{} is not divisible by {FACTOR}",
            pixels.0, pixels.1
        )));
    }
    Ok((pixels.0 / FACTOR, pixels.1 / FACTOR))
}

/// Mean over colour channels, `(F, H, W)`; used by the flow estimator.
pub fn grayscale(pixels: &Array4<f32>) -> ndarray::Array3<f32> {
    pixels.mean_axis(Axis(1)).expect("non-empty channel axis")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_constant_video_round_trips() {
        let v = Array4::from_shape_fn((2, 3, 8, 8), |(f, c, y, x)| {
            ((f + c * 3 + (y / 2) * 5 + (x / 2) * 7) % 13) as f32 / 6.5 - 1.0
        });
        let z = encode(&v).unwrap();
        assert_eq!(z.dim(), (2, 4, 4, 4));
        let back = decode(&z).unwrap();
        let err = (&back - &v).iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn luminance_channel_shifts_colour() {
        let mut z = Array4::<f32>::zeros((2, 4, 4, 4));
        z.index_axis_mut(Axis(1), 3).fill(0.5);
        let px = decode(&LatentVideo::new(z).unwrap()).unwrap();
        assert!(px.iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }

    #[test]
    fn rejects_odd_sizes() {
        assert!(encode(&Array4::zeros((2, 3, 7, 8))).is_err());
        assert!(latent_size((31, 32)).is_err());
        assert_eq!(latent_size((32, 32)).unwrap(), (16, 16));
    }
}
