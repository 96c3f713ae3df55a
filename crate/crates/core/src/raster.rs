//! RGB images in `[0, 1]`, PNG codec glue, and bilinear resampling.

use std::path::Path;

use crate::datamodel::BBox;
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Real};

/// Row-major `height × width × 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        })
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image {
                    path: path.to_path_buf(),
                    message: other.to_string(),
                },
            })
    }

    /// Bilinear resize with half-pixel centers and edge clamping. Resizing
    /// to the same size returns an identical image.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Self::new(width, height);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ly = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let lx = (fx - x0 as f64) as f32;
                for c in 0..3 {
                    let top = self.get(x0, y0, c) * (1.0 - lx) + self.get(x1, y0, c) * lx;
                    let bot = self.get(x0, y1, c) * (1.0 - lx) + self.get(x1, y1, c) * lx;
                    out.data[(y * width + x) * 3 + c] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        out
    }

    /// Samples the (possibly overhanging) square `window` into a
    /// `side × side` image with bilinear interpolation; pixels outside the
    /// source image read as zero.
    pub fn resample_window(&self, window: &BBox, side: usize) -> Self {
        let step_x = window.width() / side as f64;
        let step_y = window.height() / side as f64;
        let mut out = Self::new(side, side);
        let fetch = |x: isize, y: isize, c: usize| -> f32 {
            if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                0.0
            } else {
                self.get(x as usize, y as usize, c)
            }
        };
        for oy in 0..side {
            let fy = window.y1 + (oy as f64 + 0.5) * step_y - 0.5;
            let y0 = fy.floor();
            let ly = (fy - y0) as f32;
            let y0 = y0 as isize;
            for ox in 0..side {
                let fx = window.x1 + (ox as f64 + 0.5) * step_x - 0.5;
                let x0 = fx.floor();
                let lx = (fx - x0) as f32;
                let x0 = x0 as isize;
                for c in 0..3 {
                    let mut v = fetch(x0, y0, c) * (1.0 - lx) * (1.0 - ly);
                    if lx != 0.0 {
                        v += fetch(x0 + 1, y0, c) * lx * (1.0 - ly);
                    }
                    if ly != 0.0 {
                        v += fetch(x0, y0 + 1, c) * (1.0 - lx) * ly;
                        if lx != 0.0 {
                            v += fetch(x0 + 1, y0 + 1, c) * lx * ly;
                        }
                    }
                    out.data[(oy * side + ox) * 3 + c] = v;
                }
            }
        }
        out
    }

    /// Normalizes per channel and zero-pads (in normalized space) on the
    /// bottom/right to a `canvas_h × canvas_w` CHW map.
    pub fn to_canvas<T: Real>(
        &self,
        mean: [f32; 3],
        std: [f32; 3],
        canvas_h: usize,
        canvas_w: usize,
    ) -> FeatureMap<T> {
        assert!(canvas_h >= self.height && canvas_w >= self.width);
        let mut fm = FeatureMap::zeros(3, canvas_h, canvas_w);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = (self.get(x, y, c) - mean[c]) / std[c];
                    fm.data[(c * canvas_h + y) * canvas_w + x] = T::of(v as f64);
                }
            }
        }
        fm
    }
}

/// Resize rule "shorter side to `shorter`, longer side at most
/// `max_longer`", keeping the aspect ratio.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResizePolicy {
    pub shorter: f64,
    pub max_longer: f64,
}

impl ResizePolicy {
    pub const PAPER: ResizePolicy = ResizePolicy {
        shorter: 800.0,
        max_longer: 1333.0,
    };

    pub fn new(shorter: f64, max_longer: f64) -> Self {
        Self { shorter, max_longer }
    }

    /// Multiplicative factor applied to both axes of a `width × height`
    /// image.
    pub fn factor(&self, width: f64, height: f64) -> f64 {
        let short = width.min(height);
        let long = width.max(height);
        (self.shorter / short).min(self.max_longer / long)
    }

    /// Integer output size `(width, height)` for a `width × height` image.
    pub fn output_size(&self, width: usize, height: usize) -> (usize, usize) {
        let f = self.factor(width as f64, height as f64);
        (
            ((width as f64 * f).round() as usize).max(1),
            ((height as f64 * f).round() as usize).max(1),
        )
    }
}

/// Rounds `n` up to a multiple of `m`.
pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}
