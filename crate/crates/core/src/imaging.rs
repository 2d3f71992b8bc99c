//! Image and mask primitives: masked extraction, resizing, compositing, PNG I/O.
//!
//! Pixels are `f32` in `[0, 1]`, stored row-major with interleaved channels
//! (`HWC`). 8-bit quantization only happens at the file boundary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortraitImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// A single-channel hair mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HairMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Bilinear,
    #[default]
    Area,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ResizePolicy {
    pub method: ResizeMethod,
    /// Widen the bilinear kernel when downscaling. Ignored by the other methods.
    #[serde(default)]
    pub antialias: bool,
}

impl ResizePolicy {
    pub const AREA: ResizePolicy = ResizePolicy {
        method: ResizeMethod::Area,
        antialias: false,
    };
    pub const BILINEAR: ResizePolicy = ResizePolicy {
        method: ResizeMethod::Bilinear,
        antialias: false,
    };
    pub const NEAREST: ResizePolicy = ResizePolicy {
        method: ResizeMethod::Nearest,
        antialias: false,
    };
}

fn check_values(data: &[f32], what: &str) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!(
            "{what} value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

impl PortraitImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {}x{}x3 = {} values, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        check_values(&data, "pixel")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Build from a per-pixel closure `(row, col, channel) -> value`; values are clamped.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height {
            for j in 0..width {
                for c in 0..3 {
                    data.push(f(i, j, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub(crate) fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + channel]
    }

    pub fn max_abs_diff(&self, other: &PortraitImage) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl HairMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "expected {}x{} = {} mask values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        check_values(&data, "mask")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Fraction of pixels with a nonzero value.
    pub fn coverage(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&v| v > 0.0).count() as f32 / self.data.len() as f32
    }

    /// `1 - mask`.
    pub fn inverted(&self) -> HairMask {
        HairMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Grayscale dilation with a `(2r+1)x(2r+1)` square structuring element.
    pub fn dilate(&self, radius: usize) -> HairMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        // Separable max filter: rows, then columns.
        let mut tmp = vec![0.0f32; h * w];
        for i in 0..h {
            for j in 0..w {
                let lo = j.saturating_sub(radius);
                let hi = (j + radius).min(w - 1);
                tmp[i * w + j] = self.data[i * w + lo..=i * w + hi]
                    .iter()
                    .copied()
                    .fold(0.0, f32::max);
            }
        }
        let mut data = vec![0.0f32; h * w];
        for i in 0..h {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(h - 1);
            for j in 0..w {
                data[i * w + j] = (lo..=hi).map(|k| tmp[k * w + j]).fold(0.0, f32::max);
            }
        }
        HairMask {
            height: h,
            width: w,
            data,
        }
    }
}

fn same_resolution(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: resolution {}x{} does not match {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Pixelwise `image * mask`.
pub fn extract_hair_region(image: &PortraitImage, mask: &HairMask) -> Result<PortraitImage> {
    same_resolution(image.resolution(), mask.resolution(), "extract_hair_region")?;
    let data = image
        .data
        .chunks_exact(3)
        .zip(&mask.data)
        .flat_map(|(px, &m)| px.iter().map(move |v| v * m))
        .collect();
    Ok(PortraitImage {
        height: image.height,
        width: image.width,
        data,
    })
}

/// Pixelwise `image * (1 - mask)`.
pub fn extract_background(image: &PortraitImage, mask: &HairMask) -> Result<PortraitImage> {
    extract_hair_region(image, &mask.inverted())
}

/// `hair * mask + background * (1 - mask)`.
pub fn composite(
    hair: &PortraitImage,
    background: &PortraitImage,
    mask: &HairMask,
) -> Result<PortraitImage> {
    same_resolution(hair.resolution(), background.resolution(), "composite")?;
    same_resolution(hair.resolution(), mask.resolution(), "composite")?;
    let data = hair
        .data
        .chunks_exact(3)
        .zip(background.data.chunks_exact(3))
        .zip(&mask.data)
        .flat_map(|((h, b), &m)| (0..3).map(move |c| h[c] * m + b[c] * (1.0 - m)))
        .collect();
    Ok(PortraitImage {
        height: hair.height,
        width: hair.width,
        data,
    })
}

pub fn resize_image(
    image: &PortraitImage,
    target: (usize, usize),
    policy: ResizePolicy,
) -> Result<PortraitImage> {
    check_target(target)?;
    if image.resolution() == target {
        return Ok(image.clone());
    }
    let data = resample(
        &image.data,
        image.resolution(),
        3,
        target,
        Filter::from_policy(policy),
    );
    Ok(PortraitImage::from_raw_clamped(target.0, target.1, data))
}

/// Area-interpolated soft mask; no re-binarization.
pub fn resize_mask(mask: &HairMask, target: (usize, usize)) -> Result<HairMask> {
    check_target(target)?;
    if mask.resolution() == target {
        return Ok(mask.clone());
    }
    let mut data = resample(
        &mask.data,
        mask.resolution(),
        1,
        target,
        Filter::Area,
    );
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(HairMask {
        height: target.0,
        width: target.1,
        data,
    })
}

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {}x{}",
            target.0, target.1
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Filter {
    Nearest,
    Area,
    Bilinear { antialias: bool },
    /// Keys cubic convolution, `a = -0.5`.
    Cubic,
}

impl Filter {
    fn from_policy(policy: ResizePolicy) -> Self {
        match policy.method {
            ResizeMethod::Nearest => Filter::Nearest,
            ResizeMethod::Area => Filter::Area,
            ResizeMethod::Bilinear => Filter::Bilinear {
                antialias: policy.antialias,
            },
        }
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// For each output index, the contributing `(source index, weight)` pairs.
/// Weights are normalized to sum to one so constants are fixed points.
fn axis_weights(src: usize, dst: usize, filter: Filter) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    let clamp = |k: i64| k.clamp(0, src as i64 - 1) as usize;
    (0..dst)
        .map(|i| {
            let mut taps: Vec<(usize, f64)> = match filter {
                Filter::Nearest => {
                    let k = ((i as f64 + 0.5) * scale).floor() as i64;
                    vec![(clamp(k), 1.0)]
                }
                Filter::Area => {
                    let lo = i as f64 * scale;
                    let hi = (i + 1) as f64 * scale;
                    let first = lo.floor() as i64;
                    let last = (hi.ceil() as i64 - 1).max(first);
                    (first..=last)
                        .map(|k| {
                            let overlap = (hi.min((k + 1) as f64) - lo.max(k as f64)).max(0.0);
                            (clamp(k), overlap)
                        })
                        .filter(|&(_, w)| w > 0.0)
                        .collect()
                }
                Filter::Bilinear { .. } | Filter::Cubic => {
                    let (support, kernel): (f64, fn(f64) -> f64) = match filter {
                        Filter::Cubic => (2.0, cubic),
                        _ => (1.0, |x: f64| (1.0 - x.abs()).max(0.0)),
                    };
                    let stretch = match filter {
                        Filter::Bilinear { antialias: true } if scale > 1.0 => scale,
                        _ => 1.0,
                    };
                    let center = (i as f64 + 0.5) * scale - 0.5;
                    let reach = support * stretch;
                    let first = (center - reach).floor() as i64;
                    let last = (center + reach).ceil() as i64;
                    (first..=last)
                        .map(|k| (clamp(k), kernel((k as f64 - center) / stretch)))
                        .filter(|&(_, w)| w != 0.0)
                        .collect()
                }
            };
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            // Merge taps that clamped onto the same source index.
            let mut merged: Vec<(usize, f32)> = Vec::with_capacity(taps.len());
            for (k, w) in taps {
                match merged.iter_mut().find(|m| m.0 == k) {
                    Some(m) => m.1 += w as f32,
                    None => merged.push((k, w as f32)),
                }
            }
            merged
        })
        .collect()
}

/// Separable resampling of an interleaved `HxWxC` buffer.
pub(crate) fn resample(
    data: &[f32],
    (h, w): (usize, usize),
    channels: usize,
    (th, tw): (usize, usize),
    filter: Filter,
) -> Vec<f32> {
    let col_w = axis_weights(w, tw, filter);
    let row_w = axis_weights(h, th, filter);

    let mut horiz = vec![0.0f32; h * tw * channels];
    for i in 0..h {
        for (j, taps) in col_w.iter().enumerate() {
            for c in 0..channels {
                horiz[(i * tw + j) * channels + c] = taps
                    .iter()
                    .map(|&(k, wt)| data[(i * w + k) * channels + c] * wt)
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; th * tw * channels];
    for (i, taps) in row_w.iter().enumerate() {
        for j in 0..tw {
            for c in 0..channels {
                out[(i * tw + j) * channels + c] = taps
                    .iter()
                    .map(|&(k, wt)| horiz[(k * tw + j) * channels + c] * wt)
                    .sum();
            }
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<PortraitImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(PortraitImage {
        height: h as usize,
        width: w as usize,
        data,
    })
}

/// Decode PNG or JPEG bytes into an RGB image.
pub fn decode_image(bytes: &[u8]) -> Result<PortraitImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::io("<memory>", e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(PortraitImage {
        height: h as usize,
        width: w as usize,
        data,
    })
}

fn to_rgb8(image: &PortraitImage) -> image::RgbImage {
    let raw = image.data.iter().copied().map(quantize).collect();
    image::RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .expect("buffer length matches dimensions")
}

pub fn save_image(image: &PortraitImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(image)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}

pub fn encode_png(image: &PortraitImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_rgb8(image)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::io("<memory>", e))?;
    Ok(buf.into_inner())
}

fn luma_to_mask(img: image::GrayImage) -> HairMask {
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    HairMask {
        height: h as usize,
        width: w as usize,
        data,
    }
}

/// Load a mask PNG, binarized at mid-gray (0 = background, 255 = hair).
pub fn load_mask(path: impl AsRef<Path>) -> Result<HairMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_luma8();
    Ok(luma_to_mask(img))
}

/// Load a user-supplied mask that must already be binary.
pub fn load_mask_strict(path: impl AsRef<Path>) -> Result<HairMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask_strict(&bytes).map_err(|e| match e {
        Error::Argument(m) => Error::Argument(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn decode_mask(bytes: &[u8]) -> Result<HairMask> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::io("<memory>", e))?
        .to_luma8();
    Ok(luma_to_mask(img))
}

/// Decode a mask that must already be binary: every pixel 0 or 255.
pub fn decode_mask_strict(bytes: &[u8]) -> Result<HairMask> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::io("<memory>", e))?
        .to_luma8();
    if let Some(v) = img.as_raw().iter().find(|v| **v != 0 && **v != 255) {
        return Err(Error::Argument(format!("mask must be binary (0 or 255), found value {v}")));
    }
    Ok(luma_to_mask(img))
}

fn to_luma8(mask: &HairMask) -> image::GrayImage {
    let raw = mask.data.iter().copied().map(quantize).collect();
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer length matches dimensions")
}

pub fn save_mask(mask: &HairMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_luma8(mask)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}

pub fn encode_mask_png(mask: &HairMask) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_luma8(mask)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::io("<memory>", e))?;
    Ok(buf.into_inner())
}
