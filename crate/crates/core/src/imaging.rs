//! Pixel handling: decode/encode, value-range conversion, patches and padding.
//!
//! Images are stored height × width × 3, row-major, interleaved RGB.

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};

/// Declared value range of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// `[-1, 1]`, the range the networks consume and produce.
    UnitSigned,
    /// `[0, 1]`
    Unit,
    /// `[0, 255]`
    Byte,
}

impl RangeTag {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            RangeTag::UnitSigned => (-1.0, 1.0),
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Byte => (0.0, 255.0),
        }
    }

    fn to_signed(self, v: f64) -> f64 {
        match self {
            RangeTag::UnitSigned => v,
            RangeTag::Unit => 2.0 * v - 1.0,
            RangeTag::Byte => v / 127.5 - 1.0,
        }
    }

    fn from_signed(self, v: f64) -> f64 {
        match self {
            RangeTag::UnitSigned => v.clamp(-1.0, 1.0),
            RangeTag::Unit => ((v + 1.0) / 2.0).clamp(0.0, 1.0),
            RangeTag::Byte => ((v + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    range: RangeTag,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, range: RangeTag, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Precondition(format!("image dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Precondition(format!(
                "expected {} samples for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(bad) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Precondition(format!("sample {bad} outside the {range:?} range")));
        }
        Ok(Self {
            height,
            width,
            range,
            data,
        })
    }

    /// Builds an image, clamping every sample into the range (NaN maps to the lower bound).
    pub fn from_clamped(height: usize, width: usize, range: RangeTag, mut data: Vec<f32>) -> Result<Self> {
        let (lo, hi) = range.bounds();
        for v in &mut data {
            *v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        }
        Self::new(height, width, range, data)
    }

    pub fn filled(height: usize, width: usize, range: RangeTag, value: f32) -> Result<Self> {
        Self::new(height, width, range, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(ImageTensor {
            height,
            width,
            range: self.range,
            data,
        })
    }

    /// Horizontal concatenation (`self` on the left).
    pub fn hconcat(&self, right: &ImageTensor) -> Result<ImageTensor> {
        if self.height != right.height || self.range != right.range {
            return Err(Error::Precondition("hconcat needs equal heights and ranges".into()));
        }
        let width = self.width + right.width;
        let mut data = Vec::with_capacity(self.height * width * 3);
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * self.width * 3..(y + 1) * self.width * 3]);
            data.extend_from_slice(&right.data[y * right.width * 3..(y + 1) * right.width * 3]);
        }
        ImageTensor::new(self.height, width, self.range, data)
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample
/// (`-1 → 1`, `n → n - 2`), folding repeatedly for large offsets.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match decoded.color() {
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16 => {
            warn!("{}: grayscale image replicated to 3 channels", path.display());
        }
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::Rgb16 | ColorType::Rgba16 => {}
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported color type {other:?}"),
            })
        }
    }
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(f32::from).collect();
    ImageTensor::new(h as usize, w as usize, RangeTag::Byte, data)
}

/// Writes PNG or JPEG according to the file extension (PNG when absent).
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = convert_range(img, RangeTag::Byte);
    let raw: Vec<u8> = bytes.data.iter().map(|&v| v as u8).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches dimensions");
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg") | Some("jpeg") => ImageFormat::Jpeg,
        _ => ImageFormat::Png,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Affine map between value ranges. Landing on `Byte` rounds half-up and clamps.
pub fn convert_range(img: &ImageTensor, target: RangeTag) -> ImageTensor {
    if img.range == target {
        return img.clone();
    }
    let data = img
        .data
        .iter()
        .map(|&v| target.from_signed(img.range.to_signed(v as f64)) as f32)
        .collect();
    ImageTensor {
        height: img.height,
        width: img.width,
        range: target,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    Random,
    Grid,
}

/// Top-left corners of the patches [`extract_patches`] would cut.
pub fn patch_positions(
    height: usize,
    width: usize,
    size: usize,
    mode: PatchMode,
    count_or_stride: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > height.min(width) {
        return Err(Error::Precondition(format!(
            "patch size {size} does not fit a {height}x{width} image"
        )));
    }
    match mode {
        PatchMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count_or_stride)
                .map(|_| (rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)))
                .collect())
        }
        PatchMode::Grid => {
            if count_or_stride == 0 || count_or_stride > size {
                return Err(Error::Precondition(format!(
                    "grid stride {count_or_stride} must lie in 1..={size} to cover the image"
                )));
            }
            let rows = grid_offsets(height, size, count_or_stride);
            let cols = grid_offsets(width, size, count_or_stride);
            Ok(rows
                .iter()
                .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
                .collect())
        }
    }
}

fn grid_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 0;
    loop {
        if p + size >= extent {
            out.push(extent - size);
            return out;
        }
        out.push(p);
        p += stride;
    }
}

/// Square patches of `size`. Random mode draws `count_or_stride` positions from
/// `seed`; grid mode tiles with stride `count_or_stride` (at most `size`), the
/// last row and column snapped to the image edge.
pub fn extract_patches(
    img: &ImageTensor,
    size: usize,
    mode: PatchMode,
    count_or_stride: usize,
    seed: u64,
) -> Result<Vec<ImageTensor>> {
    patch_positions(img.height, img.width, size, mode, count_or_stride, seed)?
        .into_iter()
        .map(|(y, x)| img.crop(y, x, size, size))
        .collect()
}

/// Original extent of an image before [`pad_to_multiple`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn restore(&self, padded: &ImageTensor) -> Result<ImageTensor> {
        padded.crop(0, 0, self.height, self.width)
    }
}

/// Reflect-pads bottom and right so both dimensions divide by `multiple`.
pub fn pad_to_multiple(img: &ImageTensor, multiple: usize) -> Result<(ImageTensor, CropRecord)> {
    if multiple == 0 {
        return Err(Error::Precondition("padding multiple must be at least 1".into()));
    }
    let record = CropRecord {
        height: img.height,
        width: img.width,
    };
    let h = img.height.div_ceil(multiple) * multiple;
    let w = img.width.div_ceil(multiple) * multiple;
    if h == img.height && w == img.width {
        return Ok((img.clone(), record));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let sy = reflect_index(y as isize, img.height);
        for x in 0..w {
            let sx = reflect_index(x as isize, img.width);
            let i = (sy * img.width + sx) * 3;
            data.extend_from_slice(&img.data[i..i + 3]);
        }
    }
    Ok((
        ImageTensor {
            height: h,
            width: w,
            range: img.range,
            data,
        },
        record,
    ))
}

/// Packs equally-sized images into an NCHW tensor, values unchanged.
pub fn to_tensor<E: Element>(images: &[&ImageTensor]) -> Result<Tensor<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("cannot pack zero images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Precondition("images in a batch must share a shape".into()));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).map(|&v| E::from_f64(v as f64)));
        }
    }
    Ok(Tensor::from_vec([images.len(), 3, h, w], data))
}

/// Unpacks batch item `n` of an NCHW tensor, clamping into `range`.
pub fn from_tensor<E: Element>(t: &Tensor<E>, n: usize, range: RangeTag) -> Result<ImageTensor> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(Error::Precondition(format!("expected 3 channels, got {c}")));
    }
    let item = t.item(n);
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            data.push(item[ch * plane + p].to_f64() as f32);
        }
    }
    ImageTensor::from_clamped(h, w, range, data)
}
