//! Seeded stand-in input for runs without a frame directory.

use ndarray::Array4;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(state: &mut u64) -> f64 {
    (splitmix(state) >> 11) as f64 / (1u64 << 53) as f64
}

/// `(F, 3, H, W)` clip in `[-1, 1]`: a red square moving right one pixel per
/// frame over a smooth texture drawn from `seed`.
pub fn translating_square(frames: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
    let mut state = seed;
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            let a = (unit(&mut state) - 0.5) * 0.8;
            let b = (unit(&mut state) - 0.5) * 0.8;
            let phase = unit(&mut state) * std::f64::consts::TAU;
            let tint = unit(&mut state);
            [a, b, phase, tint]
        })
        .collect();
    let side = (h.min(w) / 4).max(1);
    let (y0, x_start) = (h / 2 - side / 2, w / 4);
    Array4::from_shape_fn((frames, 3, h, w), |(f, c, y, x)| {
        let x0 = x_start + f;
        if (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x) {
            return [0.8, -0.3, -0.5][c];
        }
        let v: f64 = waves
            .iter()
            .map(|[a, b, p, tint]| (a * x as f64 + b * y as f64 + p).sin() * (0.6 + 0.4 * tint * c as f64 / 2.0))
            .sum::<f64>()
            / 4.0;
        (0.6 * v) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_bounded() {
        let a = translating_square(4, 16, 16, 3);
        assert_eq!(a, translating_square(4, 16, 16, 3));
        assert_ne!(a, translating_square(4, 16, 16, 4));
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn square_moves_one_pixel_per_frame() {
        let v = translating_square(3, 16, 16, 0);
        // side 4 at rows 6..10, columns 4+f..8+f
        for f in 0..3 {
            assert_eq!(v[[f, 0, 7, 4 + f]], 0.8);
            assert_eq!(v[[f, 0, 7, 7 + f]], 0.8);
            assert_ne!(v[[f, 0, 7, 8 + f]], 0.8);
        }
    }
}
