//! Pixel containers shared by every stage of the pipeline.
//!
//! [`Image`] stores interleaved RGB in row-major `H×W×3` order in the canonical
//! range `[-1, 1]`. [`RoiMask`] stores one byte per pixel, strictly `0` or `1`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Maps an 8-bit channel value to the canonical range.
#[inline]
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`], rounding and saturating.
#[inline]
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "Image::new",
                format!("{height}x{width}x3 = {}", height * width * 3),
                data.len(),
            ));
        }
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
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// True when every value is finite and inside `[-1, 1]`.
    pub fn is_canonical(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }

    /// Normalizes without resizing.
    pub fn from_rgb8(raw: &RgbImage) -> Self {
        let (w, h) = raw.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: raw.as_raw().iter().copied().map(normalize_u8).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(self.data.chunks_exact(3)) {
            *dst = Rgb([denormalize(src[0]), denormalize(src[1]), denormalize(src[2])]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&DynamicImage::ImageRgb8(self.to_rgb8()), path)
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), dtype, device)
    }

    /// Stacks equally sized images into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = images
            .first()
            .map(Image::dims)
            .ok_or_else(|| Error::shape("Image::batch_to_tensor", "at least one image", 0))?;
        let mut planar = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.dims() != (h, w) {
                return Err(Error::shape(
                    "Image::batch_to_tensor",
                    format!("{h}x{w}"),
                    format!("{}x{}", img.height, img.width),
                ));
            }
            for c in 0..3 {
                planar.extend(img.data.iter().skip(c).step_by(3).copied());
            }
        }
        let t = Tensor::from_vec(planar, (images.len(), 3, h, w), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("Image::from_tensor", "3 channels", c));
        }
        let planar: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut data = vec![0f32; h * w * 3];
        for ch in 0..3 {
            for i in 0..h * w {
                data[i * 3 + ch] = planar[ch * h * w + i];
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Splits a `(B, 3, H, W)` tensor.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RoiMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("RoiMask::new", height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::Dataset(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v == 0)
    }

    /// Thresholds an 8-bit single-channel map at 128.
    pub fn from_luma8(raw: &GrayImage) -> Self {
        let (w, h) = raw.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: raw.as_raw().iter().map(|v| (*v >= 128) as u8).collect(),
        }
    }

    /// Stored as 0 / 255.
    pub fn to_luma8(&self) -> GrayImage {
        let mut out = GrayImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(&self.data) {
            *dst = Luma([src * 255]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&DynamicImage::ImageLuma8(self.to_luma8()), path)
    }

    /// `(1, 1, H, W)` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(std::slice::from_ref(self), dtype, device)
    }

    pub fn batch_to_tensor(masks: &[RoiMask], dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = masks
            .first()
            .map(RoiMask::dims)
            .ok_or_else(|| Error::shape("RoiMask::batch_to_tensor", "at least one mask", 0))?;
        let mut flat = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if m.dims() != (h, w) {
                return Err(Error::shape(
                    "RoiMask::batch_to_tensor",
                    format!("{h}x{w}"),
                    format!("{}x{}", m.height, m.width),
                ));
            }
            flat.extend(m.data.iter().map(|v| *v as f32));
        }
        Ok(Tensor::from_vec(flat, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Reads any supported raster and adapts it to 3-channel 8-bit.
pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => {
            log::warn!(
                "{}: adapting {:?} to 8-bit RGB",
                path.display(),
                other.color()
            );
            Ok(other.into_rgb8())
        }
    }
}

pub fn load_luma8(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_luma8())
}

pub(crate) fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // write-then-rename keeps concurrent readers from seeing partial files
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: tmp.clone(),
            source,
        })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints_round_trip() {
        assert_eq!(normalize_u8(0), -1.0);
        assert_eq!(normalize_u8(255), 1.0);
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize_u8(v)), v);
        }
    }

    #[test]
    fn tensor_layout_round_trip() {
        let img = Image::from_fn(3, 5, |y, x, c| (y * 15 + x * 3 + c) as f32 / 100.0);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 5]);
        // channel-planar layout
        let v: f32 = t.get(0).unwrap().get(2).unwrap().get(1).unwrap().get(4).unwrap().to_scalar().unwrap();
        assert_eq!(v, img.get(1, 4, 2));
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(RoiMask::new(1, 2, vec![0, 2]).is_err());
        assert!(RoiMask::new(1, 2, vec![0, 1]).is_ok());
    }

    #[test]
    fn mask_luma_round_trip() {
        let m = RoiMask::from_fn(4, 4, |y, x| (x + y) % 3 == 0);
        assert_eq!(RoiMask::from_luma8(&m.to_luma8()), m);
    }
}
