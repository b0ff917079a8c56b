//! Planar RGB rasters with float samples in `[0, 1]`.

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, DynamicImage, Rgb32FImage};

use crate::error::{invalid, shape_err, Result};

/// A 3-channel image stored channel-major (`C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err(format!("empty image {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(shape_err(format!(
                "expected {} samples for a 3x{height}x{width} image, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Rejects NaN or infinite samples.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite pixel value at flat index {i}")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
            .collect()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Stacks same-sized images into a `B×3×H×W` tensor.
    pub fn stack(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| invalid("cannot stack an empty image list"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(shape_err(format!(
                    "cannot stack {}x{} with {h}x{w}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Splits a `B×3×H×W` tensor back into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(shape_err(format!("expected 3 channels, got {c}")));
        }
        let flat: Vec<f32> = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let n = 3 * h * w;
        (0..b)
            .map(|i| ImageTensor::new(h, w, flat[i * n..(i + 1) * n].to_vec()))
            .collect()
    }

    /// Bilinear resampling with half-pixel centres and no antialiasing; the
    /// same kernel the backbone applies internally.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageTensor {
        let ry = resize_weights(self.height, height);
        let rx = resize_weights(self.width, width);
        let mut out = vec![0f32; 3 * height * width];
        let mut tmp = vec![0f64; self.height * width];
        for c in 0..3 {
            let src = self.plane(c);
            for y in 0..self.height {
                for x in 0..width {
                    let row = &rx[x * self.width..(x + 1) * self.width];
                    tmp[y * width + x] = row
                        .iter()
                        .zip(&src[y * self.width..(y + 1) * self.width])
                        .map(|(&w, &v)| w * v as f64)
                        .sum();
                }
            }
            for y in 0..height {
                let col = &ry[y * self.height..(y + 1) * self.height];
                for x in 0..width {
                    let v: f64 = col
                        .iter()
                        .enumerate()
                        .map(|(sy, &w)| w * tmp[sy * width + x])
                        .sum();
                    out[(c * height + y) * width + x] = v as f32;
                }
            }
        }
        ImageTensor {
            height,
            width,
            data: out,
        }
    }

    /// Antialiased (triangle filter) resampling for data preparation.
    pub fn resize_filtered(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let resized =
            image::imageops::resize(&self.to_rgb32f(), width as u32, height as u32, FilterType::Triangle);
        ImageTensor::from_rgb32f(&resized).clamp01()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if top + height > self.height || left + width > self.width {
            return Err(shape_err(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        ImageTensor::from_fn(self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Rotates counter-clockwise by `quarter_turns * 90°`.
    pub fn rotate90(&self, quarter_turns: u8) -> ImageTensor {
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => ImageTensor::from_fn(self.width, self.height, |c, y, x| {
                self.get(c, x, self.width - 1 - y)
            }),
            2 => ImageTensor::from_fn(self.height, self.width, |c, y, x| {
                self.get(c, self.height - 1 - y, self.width - 1 - x)
            }),
            _ => ImageTensor::from_fn(self.width, self.height, |c, y, x| {
                self.get(c, self.height - 1 - x, y)
            }),
        }
    }

    pub fn to_rgb32f(&self) -> Rgb32FImage {
        Rgb32FImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)])
        })
    }

    pub fn from_rgb32f(img: &Rgb32FImage) -> ImageTensor {
        ImageTensor::from_fn(img.height() as usize, img.width() as usize, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c]
        })
    }

    /// Grayscale and alpha inputs are promoted to RGB.
    pub fn from_dynamic(img: &DynamicImage) -> ImageTensor {
        ImageTensor::from_rgb32f(&img.to_rgb32f())
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let rgb8 = image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|c| (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        DynamicImage::ImageRgb8(rgb8)
    }
}

/// Row-major `out_len × in_len` interpolation weights for 1-D bilinear
/// resampling (half-pixel centres, edge clamped).
pub fn resize_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}
