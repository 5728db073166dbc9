//! RGB images as planar `f32` in `[0, 1]`, plus PNG/JPEG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Planar (CHW) RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image data size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        Self::new(height, width, data)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let s = self.height * self.width;
        &self.data[c * s..(c + 1) * s]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let s = self.height * self.width;
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }

    /// Bilinear resampling of the window `(top, left, h, w)` to `out_h x out_w`
    /// (half-pixel centres, edge clamped).
    pub fn resample(&self, top: f64, left: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Image {
        let mut out = vec![0f32; 3 * out_h * out_w];
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        for oy in 0..out_h {
            let fy = (top + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for ox in 0..out_w {
                let fx = (left + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..3 {
                    let p = self.plane(c);
                    let a = p[y0 * self.width + x0];
                    let b = p[y0 * self.width + x1];
                    let d = p[y1 * self.width + x0];
                    let e = p[y1 * self.width + x1];
                    let top_row = a + (b - a) * wx;
                    let bottom_row = d + (e - d) * wx;
                    out[(c * out_h + oy) * out_w + ox] = top_row + (bottom_row - top_row) * wy;
                }
            }
        }
        Image::new(out_h, out_w, out)
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if (out_h, out_w) == (self.height, self.width) {
            return self.clone();
        }
        self.resample(0.0, 0.0, self.height as f64, self.width as f64, out_h, out_w)
    }
}

/// Saves a single-channel `[0, 1]` map as an 8-bit grayscale PNG, scaling
/// each cell to a `scale x scale` block.
pub fn save_gray_png(values: &[f32], height: usize, width: usize, scale: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn((width * scale) as u32, (height * scale) as u32, |x, y| {
        let v = values[(y as usize / scale) * width + x as usize / scale];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let img = Image::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect());
        assert_eq!(img.resize(2, 2), img);
        let again = img.resample(0.0, 0.0, 2.0, 2.0, 2, 2);
        for (a, b) in again.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_resamples_to_constant() {
        let img = Image::filled(5, 7, [0.2, 0.4, 0.9]);
        let out = img.resample(1.3, 0.7, 3.1, 4.4, 6, 6);
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&v| (v - img.at(c, 0, 0)).abs() < 1e-6));
        }
    }

    #[test]
    fn png_round_trip_and_bad_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 3, (0..18).map(|v| (v * 15) as f32 / 255.0).collect());
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load(&p).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not an image").unwrap();
        match Image::load(&bad) {
            Err(Error::Ingestion { path, .. }) => assert_eq!(path, bad),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
