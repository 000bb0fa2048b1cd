//! Synthetic linear motion blur for building paired training data.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, reflect_index, save_image, ImageTensor};

/// Normalized point-spread function, `size × size`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    pub size: usize,
    pub length: usize,
    pub angle: f64,
    pub weights: Vec<f64>,
}

impl BlurKernel {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Straight-line kernel through the center.
///
/// `length` unit-spaced samples along the direction `angle` (degrees,
/// counter-clockwise from +x with y pointing down) are splatted bilinearly and
/// the result is normalized to sum to one.
pub fn make_linear_kernel(length: usize, angle: f64, size: usize) -> Result<BlurKernel> {
    if size % 2 == 0 {
        return Err(Error::Precondition(format!("kernel size {size} must be odd")));
    }
    if length == 0 || length > size {
        return Err(Error::Precondition(format!("kernel length {length} must be in 1..={size}")));
    }
    if !angle.is_finite() {
        return Err(Error::Precondition("kernel angle must be finite".into()));
    }
    let angle = angle.rem_euclid(180.0);
    let (dy, dx) = {
        let r = angle.to_radians();
        (-r.sin(), r.cos())
    };
    let c = (size / 2) as f64;
    let mut weights = vec![0.0; size * size];
    for s in 0..length {
        let t = s as f64 - (length as f64 - 1.0) / 2.0;
        let (y, x) = (c + t * dy, c + t * dx);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wy * wx;
                if w <= 0.0 {
                    continue;
                }
                let (r, q) = (y0 as isize + oy, x0 as isize + ox);
                if (0..size as isize).contains(&r) && (0..size as isize).contains(&q) {
                    weights[r as usize * size + q as usize] += w;
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(BlurKernel {
        size,
        length,
        angle,
        weights,
    })
}

/// Smallest odd kernel size that holds a line of `length`.
pub fn kernel_size_for(length: usize) -> usize {
    length | 1
}

/// Per-channel 2-D convolution with reflect boundaries; the result is clamped
/// to the image's value range.
pub fn apply_blur(img: &ImageTensor, kernel: &BlurKernel) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let r = (kernel.size / 2) as isize;
    let src = img.data();
    let taps: Vec<(isize, isize, f64)> = (0..kernel.size)
        .flat_map(|i| (0..kernel.size).map(move |j| (i, j)))
        .map(|(i, j)| (i as isize - r, j as isize - r, kernel.at(i, j)))
        .filter(|t| t.2 != 0.0)
        .collect();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for &(dy, dx, k) in &taps {
                let sy = reflect_index(y as isize - dy, h);
                let sx = reflect_index(x as isize - dx, w);
                let base = (sy * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += k * src[base + c] as f64;
                }
            }
            let base = (y * w + x) * 3;
            for c in 0..3 {
                out[base + c] = acc[c] as f32;
            }
        }
    }
    ImageTensor::from_clamped(h, w, img.range(), out).expect("shape preserved")
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Blur parameters drawn for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurDraw {
    pub length: usize,
    pub angle: f64,
}

/// Deterministic draw for image `index` under `seed`, independent of the
/// order in which images are processed.
pub fn draw_blur(seed: u64, index: usize, length_range: (usize, usize)) -> BlurDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    BlurDraw {
        length: rng.gen_range(length_range.0..=length_range.1),
        angle: rng.gen_range(0.0..180.0),
    }
}

/// Writes `out_dir/blur/<stem>.png` and `out_dir/sharp/<stem>.png` for every
/// image in `sharp_dir`; returns the number of pairs.
pub fn synthesize_pairs(sharp_dir: &Path, out_dir: &Path, length_range: (usize, usize), seed: u64) -> Result<usize> {
    let (lo, hi) = length_range;
    if lo == 0 || lo > hi {
        return Err(Error::Precondition(format!("invalid blur length range {lo}..={hi}")));
    }
    let files = list_images(sharp_dir)?;
    let mut written = 0;
    for (index, path) in files.iter().enumerate() {
        let sharp = match load_image(path) {
            Ok(img) => img,
            Err(e @ Error::Format { .. }) => {
                log::warn!("skipping {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let draw = draw_blur(seed, index, length_range);
        let kernel = make_linear_kernel(draw.length, draw.angle, kernel_size_for(draw.length))?;
        let blurred = apply_blur(&sharp, &kernel);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = format!("{stem}.png");
        save_image(&blurred, out_dir.join("blur").join(&name))?;
        save_image(&sharp, out_dir.join("sharp").join(&name))?;
        log::info!("{name}: length {} angle {:.1}", draw.length, draw.angle);
        written += 1;
    }
    if written == 0 {
        return Err(Error::Precondition(format!("{} contains no decodable images", sharp_dir.display())));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RangeTag;
    use proptest::prelude::{prop_assert, proptest};

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
        ImageTensor::new(h, w, RangeTag::Byte, data).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let delta = make_linear_kernel(1, 37.0, 3).unwrap();
        assert_eq!(delta.at(1, 1), 1.0);
        assert_eq!(delta.weights.iter().filter(|&&w| w != 0.0).count(), 1);

        let row = make_linear_kernel(3, 0.0, 3).unwrap();
        for c in 0..3 {
            assert!((row.at(1, c) - 1.0 / 3.0).abs() < 1e-12);
            assert_eq!(row.at(0, c), 0.0);
            assert_eq!(row.at(2, c), 0.0);
        }

        let diag = make_linear_kernel(5, 45.0, 7).unwrap();
        assert!((diag.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // 45° runs from lower-left to upper-right: row + col ≈ 6
        for r in 0..7 {
            for c in 0..7 {
                if diag.at(r, c) > 0.0 {
                    assert!((r as isize + c as isize - 6).abs() <= 1, "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn kernel_preconditions() {
        assert!(make_linear_kernel(3, 0.0, 4).is_err());
        assert!(make_linear_kernel(5, 0.0, 3).is_err());
        assert!(make_linear_kernel(0, 0.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn kernels_are_normalized(length in 1usize..16, angle in 0.0f64..180.0) {
            let k = make_linear_kernel(length, angle, kernel_size_for(length)).unwrap();
            prop_assert!(k.size % 2 == 1);
            prop_assert!(k.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_convolution() {
        let img = noise(16, 16, 4);
        let k = make_linear_kernel(3, 0.0, 3).unwrap();
        let got = apply_blur(&img, &k);
        for y in 0..16isize {
            for x in 0..16isize {
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for i in 0..3isize {
                        for j in 0..3isize {
                            let sy = reflect_index(y - (i - 1), 16);
                            let sx = reflect_index(x - (j - 1), 16);
                            acc += k.at(i as usize, j as usize) * img.get(sy, sx, c) as f64;
                        }
                    }
                    let v = got.get(y as usize, x as usize, c) as f64;
                    assert!((v - acc).abs() <= 1e-6 * acc.abs().max(1.0), "{y},{x},{c}");
                }
            }
        }
    }

    #[test]
    fn constant_and_delta_are_fixed_points() {
        let flat = ImageTensor::filled(9, 11, RangeTag::Unit, 0.4).unwrap();
        let k = make_linear_kernel(7, 63.0, 7).unwrap();
        assert!(apply_blur(&flat, &k).data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let img = noise(8, 8, 1);
        assert_eq!(apply_blur(&img, &make_linear_kernel(1, 0.0, 1).unwrap()), img);
    }

    #[test]
    fn draws_are_per_index() {
        let a = draw_blur(7, 3, (5, 15));
        assert_eq!(a, draw_blur(7, 3, (5, 15)));
        assert!((5..=15).contains(&a.length) && (0.0..180.0).contains(&a.angle));
        assert_ne!(draw_blur(7, 3, (5, 15)), draw_blur(7, 4, (5, 15)));
    }
}
