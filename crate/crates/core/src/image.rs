//! The pixel carrier shared by every stage: an `H x W x C` image in `[-1, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Row-major `height x width x channels` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image from values that may stray outside the range; they are clamped.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid fill")
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, channels, data).expect("valid dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Converts `[0, 255]` RGB/gray bytes.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Expands to three channels (grayscale is replicated).
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Self { channels: 3, data, ..*self }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Self::from_u8(rgb.height() as usize, rgb.width() as usize, 3, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb();
        let buf = image::RgbImage::from_raw(rgb.width as u32, rgb.height as u32, rgb.to_u8())
            .expect("buffer matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Bilinear resampling with half-pixel centers and edge clamping. Resizing to the
    /// current size returns an exact copy.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!("cannot resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |o: usize, scale: f64, len: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64).min(1.0) as f32)
        };
        let xs: Vec<_> = (0..width).map(|x| taps(x, sx, self.width)).collect();
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
                    let bottom = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Self::from_clamped(height, width, c, data)
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!("cannot resize to {width}x{height}")));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                let off = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[off..off + c]);
            }
        }
        Self::new(height, width, c, data)
    }

    /// Box-filter downscale by `factor >= 1`: each output pixel is the area-weighted
    /// mean of the input pixels it covers. Output size is `floor(input / factor)`.
    pub fn downscale_area(&self, factor: f64) -> Result<Self> {
        if !(factor >= 1.0) || !factor.is_finite() {
            return Err(Error::Argument(format!("downscale factor {factor} must be >= 1")));
        }
        let height = (self.height as f64 / factor).floor() as usize;
        let width = (self.width as f64 / factor).floor() as usize;
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "downscaling {}x{} by {factor} leaves an empty image",
                self.width, self.height
            )));
        }
        if factor == 1.0 {
            return Ok(self.clone());
        }
        let spans = |len: usize| -> Vec<Vec<(usize, f64)>> {
            (0..len)
                .map(|o| {
                    let (lo, hi) = (o as f64 * factor, (o + 1) as f64 * factor);
                    (lo.floor() as usize..hi.ceil() as usize)
                        .map(|i| (i, (hi.min(i as f64 + 1.0) - lo.max(i as f64)) / factor))
                        .filter(|&(_, w)| w > 0.0)
                        .collect()
                })
                .collect()
        };
        let (ys, xs) = (spans(height), spans(width));
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for ry in &ys {
            for rx in &xs {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for &(iy, wy) in ry {
                        for &(ix, wx) in rx {
                            acc += wy * wx * self.get(iy, ix, ch) as f64;
                        }
                    }
                    data.push(acc as f32);
                }
            }
        }
        Self::from_clamped(height, width, c, data)
    }
}

/// Packs same-shaped images into an NCHW batch.
pub fn to_batch<T: Scalar>(images: &[ImageTensor]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} and {w}x{h}x{c} images",
                img.width, img.height, img.channels
            )));
        }
        for ch in 0..c {
            for i in 0..h * w {
                data.push(T::from_f32(img.data[i * c + ch]));
            }
        }
    }
    Ok(Tensor::from_vec([images.len(), c, h, w], data))
}

/// Unpacks an NCHW batch; values are clamped into `[-1, 1]`.
pub fn from_batch<T: Scalar>(t: &Tensor<T>) -> Result<Vec<ImageTensor>> {
    let [n, c, h, w] = t.shape;
    (0..n)
        .map(|i| {
            let item = t.item(i);
            let mut data = vec![0.0f32; h * w * c];
            for ch in 0..c {
                for p in 0..h * w {
                    data[p * c + ch] = item[ch * h * w + p].as_f32();
                }
            }
            ImageTensor::from_clamped(h, w, c, data)
        })
        .collect()
}
