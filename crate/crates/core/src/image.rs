//! Images, pixel regions and the shared preprocessing rule.
//!
//! An [`Image`] holds RGB values in `[-1, 1]`, stored channel-major
//! (`[3, H, W]`, red first). 8-bit sources map affinely: `0 -> -1`,
//! `255 -> 1`.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut pixels = vec![0.0; 3 * width * height];
        for (c, plane) in pixels.chunks_mut(width * height).enumerate() {
            plane.fill(rgb[c]);
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    /// Interleaved 8-bit RGB to `[-1, 1]`.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Shape(format!(
                "{}x{} RGB8 buffer needs {} bytes, got {}",
                width,
                height,
                3 * width * height,
                rgb.len()
            )));
        }
        let hw = width * height;
        let mut pixels = vec![0.0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                pixels[c * hw + i] = rgb[3 * i + c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    /// Interleaved 8-bit RGB, rounding to nearest and clamping to range.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.width * self.height;
        let mut out = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                let v = (self.pixels[c * hw + i].clamp(-1.0, 1.0) + 1.0) * 127.5;
                out[3 * i + c] = (v + 0.5) as u8;
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Planar `[3, H, W]` values.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.pixels.clone())
            .expect("image tensor shape")
    }

    /// Entry `index` of an `[N, 3, H, W]` batch.
    pub fn from_batch(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || index >= s[0] {
            return Err(Error::Shape(format!(
                "cannot take image {} from batch {:?}",
                index, s
            )));
        }
        let per = 3 * s[2] * s[3];
        Image::new(
            s[3],
            s[2],
            t.data()[index * per..(index + 1) * per].to_vec(),
        )
    }

    pub fn batch(images: &[Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Validation("empty image batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for im in images {
            if im.width != w || im.height != h {
                return Err(Error::Shape(format!(
                    "batch mixes {}x{} and {}x{} images",
                    w, h, im.width, im.height
                )));
            }
            data.extend_from_slice(&im.pixels);
        }
        Tensor::from_vec(&[images.len(), 3, h, w], data)
    }

    pub fn validate_finite(&self) -> Result<()> {
        if let Some(i) = self.pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "pixel value {} at index {} is not finite",
                self.pixels[i], i
            )));
        }
        Ok(())
    }

    /// Reject non-finite or out-of-range values.
    pub fn validate(&self) -> Result<()> {
        self.validate_finite()?;
        if let Some(v) = self.pixels.iter().find(|v| v.abs() > 1.0 + 1e-6) {
            return Err(Error::Validation(format!(
                "pixel value {} outside [-1, 1]",
                v
            )));
        }
        Ok(())
    }

    /// Mean absolute difference over all values.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        debug_assert_eq!(self.pixels.len(), other.pixels.len());
        let s: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.pixels.len().max(1) as f64
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::filled(width, height, [0.0; 3]);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..3 {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// The shared normalization: square input resized to `size x size`.
    pub fn preprocess(&self, size: usize) -> Result<Image> {
        if self.width != self.height {
            return Err(Error::Preprocess(format!(
                "image is {}x{}, expected a square image",
                self.width, self.height
            )));
        }
        self.validate()?;
        Ok(self.resize_bilinear(size, size))
    }

    pub fn crop(&self, rect: Rect) -> Result<Image> {
        rect.check_within(self.width, self.height)?;
        let mut out = Image::filled(rect.width, rect.height, [0.0; 3]);
        for c in 0..3 {
            for y in 0..rect.height {
                for x in 0..rect.width {
                    out.set(c, y, x, self.get(c, rect.y + y, rect.x + x));
                }
            }
        }
        Ok(out)
    }

    /// Paste `patch`, resized bilinearly to `rect`, over a copy of `self`.
    pub fn paste(&self, patch: &Image, rect: Rect) -> Result<Image> {
        rect.check_within(self.width, self.height)?;
        let resized = patch.resize_bilinear(rect.width, rect.height);
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..rect.height {
                for x in 0..rect.width {
                    out.set(c, rect.y + y, rect.x + x, resized.get(c, y, x));
                }
            }
        }
        Ok(out)
    }
}

/// Axis-aligned pixel rectangle `[x, x + width) x [y, y + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect {
            x,
            y,
            width,
            height,
        }
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.x + self.width > width
            || self.y + self.height > height
        {
            return Err(Error::Validation(format!(
                "rectangle {}x{} at ({}, {}) does not fit in a {}x{} frame",
                self.width, self.height, self.x, self.y, width, height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Pixel-resolution binary region; `true` marks pixels to regenerate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    pixels: Vec<bool>,
}

impl RegionMask {
    pub fn empty(width: usize, height: usize) -> Self {
        RegionMask {
            width,
            height,
            pixels: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        RegionMask {
            width,
            height,
            pixels: vec![true; width * height],
        }
    }

    pub fn from_rect(width: usize, height: usize, rect: Rect) -> Result<Self> {
        rect.check_within(width, height)?;
        let mut m = Self::empty(width, height);
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                m.pixels[y * width + x] = true;
            }
        }
        Ok(m)
    }

    /// Row-major pixels, `true` = regenerate.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} region needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(RegionMask {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.pixels.iter().all(|&p| p)
    }

    /// Nearest-neighbour resampling to a new resolution.
    pub fn resize_nearest(&self, width: usize, height: usize) -> RegionMask {
        let mut out = RegionMask::empty(width, height);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                out.pixels[y * width + x] = self.pixels[sy * self.width + sx];
            }
        }
        out
    }

    /// Mean absolute difference of two images restricted to pixels where the
    /// region equals `inside`. Returns 0 when the selection is empty.
    pub fn masked_mean_abs_diff(&self, a: &Image, b: &Image, inside: bool) -> f64 {
        let hw = self.width * self.height;
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for (i, &p) in self.pixels.iter().enumerate() {
            if p != inside {
                continue;
            }
            for c in 0..3 {
                acc += (a.pixels[c * hw + i] - b.pixels[c * hw + i]).abs() as f64;
            }
            count += 3;
        }
        if count == 0 {
            0.0
        } else {
            acc / count as f64
        }
    }
}
