//! Minimal in-memory image type plus the pixel-level primitives the
//! augmentation pipeline and the synthetic renderer are built from.
//!
//! Pixels are stored row-major in HWC order as `f64` in `[0, 1]`. PNG is the
//! on-disk format; 1-channel and 3-channel images are supported.

use std::path::Path;

use crate::error::{ClpError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(ClpError::Contract(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Bilinear sample at a fractional position, clamping to the border.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = yc - y0 as f64;
        let fx = xc - x0 as f64;
        let v00 = self.get(y0, x0, c);
        let v01 = self.get(y0, x1, c);
        let v10 = self.get(y1, x0, c);
        let v11 = self.get(y1, x1, c);
        v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx
    }

    /// Resize to `(height, width)` with bilinear interpolation. Returns a
    /// clone when the size already matches.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::zeros(height, width, self.channels);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            // Align pixel centers between the two grids.
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear(src_y, src_x, c));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Rotate by `degrees` around the image center, bilinear resampling with
    /// border clamp.
    pub fn rotate(&self, degrees: f64) -> Image {
        if degrees == 0.0 {
            return self.clone();
        }
        let rad = degrees.to_radians();
        let (sin, cos) = rad.sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = Image::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // Inverse mapping: rotate destination back into the source.
                let src_y = cy + dy * cos - dx * sin;
                let src_x = cx + dy * sin + dx * cos;
                for c in 0..self.channels {
                    out.set(y, x, c, self.sample_bilinear(src_y, src_x, c));
                }
            }
        }
        out
    }

    /// Crop the rectangle starting at `(top, left)` with the given size.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(ClpError::Contract(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        let mut out = Image::zeros(height, width, self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(top + y, left + x, c));
                }
            }
        }
        Ok(out)
    }

    pub fn clip_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path).map_err(|source| ClpError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let img = match dynimg {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
                Image {
                    height: h,
                    width: w,
                    channels: 1,
                    data,
                }
            }
            other => {
                let rgb = other.into_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let data = rgb.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
                Image {
                    height: h,
                    width: w,
                    channels: 3,
                    data,
                }
            }
        };
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.channels {
            1 => {
                let raw: Vec<u8> = self.data.iter().copied().map(to_u8).collect();
                image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
                    .expect("buffer sized by construction")
                    .save(path)
            }
            3 => {
                let raw: Vec<u8> = self.data.iter().copied().map(to_u8).collect();
                image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
                    .expect("buffer sized by construction")
                    .save(path)
            }
            c => {
                return Err(ClpError::Contract(format!(
                    "cannot encode {c}-channel image as PNG"
                )))
            }
        };
        res.map_err(|source| ClpError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
