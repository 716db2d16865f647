//! RGB image planes with values in `[0, 1]`, stored channel-major.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Result, SelicError};

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    /// Planar CHW layout, 3 channels.
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(SelicError::Shape(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
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

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized_8bit(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Self { height: self.height, width: self.width, data }
    }

    /// Pads with edge replication to the smallest multiple of `multiple` in
    /// each dimension. Returns the padded image and the original `(h, w)`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<(ImagePlane, (usize, usize))> {
        if self.is_empty() {
            return Err(SelicError::InvalidInput("cannot pad an empty image".into()));
        }
        if multiple == 0 {
            return Err(SelicError::InvalidInput("padding multiple must be >= 1".into()));
        }
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        let padded = ImagePlane::from_fn(ph, pw, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        });
        Ok((padded, self.dims()))
    }

    /// Top-left crop.
    pub fn crop(&self, height: usize, width: usize) -> Result<ImagePlane> {
        self.crop_at(0, 0, height, width)
    }

    pub fn crop_at(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImagePlane> {
        if top + height > self.height || left + width > self.width {
            return Err(SelicError::Shape(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImagePlane::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn flip_horizontal(&self) -> ImagePlane {
        ImagePlane::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    /// Little-endian bytes of the raw values; the identity used for hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        ImagePlane::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(self.get(0, y, x)), to_u8(self.get(1, y, x)), to_u8(self.get(2, y, x))])
        })
    }

    /// Loads any PNG or JPEG as 8-bit RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let plane = Self::from_rgb8(&img);
        if plane.is_empty() {
            return Err(SelicError::InvalidInput(format!("{} is empty", path.display())));
        }
        Ok(plane)
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
