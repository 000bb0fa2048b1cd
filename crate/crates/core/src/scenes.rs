//! Procedural test scenes: smooth gradients overlaid with hard-edged shapes
//! and stripes, so blur visibly degrades them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{ImageTensor, RangeTag};

/// Deterministic byte-range scene of the given size.
pub fn random_scene(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let base: [f64; 3] = [rng.gen_range(40.0..200.0), rng.gen_range(40.0..200.0), rng.gen_range(40.0..200.0)];
    let slope: [f64; 3] = [rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0), rng.gen_range(-60.0..60.0)];
    let mut data = vec![0.0f32; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let t = (x as f64 / w + y as f64 / h) / 2.0;
            for c in 0..3 {
                data[(y * width + x) * 3 + c] = (base[c] + slope[c] * t) as f32;
            }
        }
    }
    let shapes = 4 + rng.gen_range(0..5);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
        let (cy, cx) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
        let size = rng.gen_range(0.08..0.3) * h.min(w);
        let kind = rng.gen_range(0..3);
        let period = rng.gen_range(3.0..8.0);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match kind {
                    0 => dy.abs() < size && dx.abs() < size * 0.7,
                    1 => dy * dy + dx * dx < size * size,
                    _ => dy.abs() < size && dx.abs() < size && ((x as f64 / period).floor() as i64) % 2 == 0,
                };
                if inside {
                    data[(y * width + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    ImageTensor::from_clamped(height, width, RangeTag::Byte, data).expect("valid scene")
}
