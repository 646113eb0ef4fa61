//! In-memory image representation and 8-bit PNG I/O.
//!
//! All pipeline stages exchange [`ImageGrid`]s: H×W×C arrays of `f64`
//! intensities in `[0, 1]`. `dynamic_range` records provenance (255 for
//! values that came from 8-bit files, 1.0 for natively normalized data)
//! and is what the fidelity metrics use as the L term.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Minimum spatial extent accepted by the pipeline.
pub const MIN_SIDE: usize = 8;

/// An image as unitless intensities in `[0, 1]`, shape H×W×C.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub pixels: Array3<f64>,
    /// Intensity scale of the source data (255 for 8-bit provenance).
    pub dynamic_range: f64,
}

impl ImageGrid {
    /// Wrap an array after checking the grid invariants: values in `[0,1]`,
    /// both sides at least [`MIN_SIDE`], and 1 or 3 channels.
    pub fn new(pixels: Array3<f64>, dynamic_range: f64) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("channel count must be 1 or 3, got {c}")));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Param("pixel values must be finite and in [0, 1]".into()));
        }
        if !(dynamic_range.is_finite() && dynamic_range > 0.0) {
            return Err(Error::Param(format!("dynamic range must be positive, got {dynamic_range}")));
        }
        Ok(Self { pixels, dynamic_range })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// Load an 8-bit PNG, normalizing intensities to `[0,1]` by dividing by
    /// 255. Grayscale files become single-channel grids, everything else is
    /// read as RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (pixels, c) = match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                let mut arr = Array3::zeros((h as usize, w as usize, 1));
                for (x, y, p) in g.enumerate_pixels() {
                    arr[(y as usize, x as usize, 0)] = f64::from(p.0[0]) / 255.0;
                }
                (arr, 1)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let mut arr = Array3::zeros((h as usize, w as usize, 3));
                for (x, y, p) in rgb.enumerate_pixels() {
                    for ch in 0..3 {
                        arr[(y as usize, x as usize, ch)] = f64::from(p.0[ch]) / 255.0;
                    }
                }
                (arr, 3)
            }
        };
        let _ = c;
        Self::new(pixels, 255.0)
    }

    /// Write as an 8-bit PNG (grayscale for 1 channel, RGB for 3), mapping
    /// `[0,1]` to `0..=255` with rounding.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.pixels.dim();
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if c == 1 {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                p.0[0] = quant(self.pixels[(y as usize, x as usize, 0)]);
            }
            buf.save(path)?;
        } else {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = quant(self.pixels[(y as usize, x as usize, ch)]);
                }
            }
            buf.save(path)?;
        }
        Ok(())
    }

    /// PNG bytes in memory, quantized the same way as [`Self::save_png`].
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let (h, w, c) = self.pixels.dim();
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut bytes = std::io::Cursor::new(Vec::new());
        if c == 1 {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                p.0[0] = quant(self.pixels[(y as usize, x as usize, 0)]);
            }
            buf.write_to(&mut bytes, image::ImageFormat::Png)?;
        } else {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                for ch in 0..3 {
                    p.0[ch] = quant(self.pixels[(y as usize, x as usize, ch)]);
                }
            }
            buf.write_to(&mut bytes, image::ImageFormat::Png)?;
        }
        Ok(bytes.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut arr = Array3::zeros((8, 8, 1));
        arr[(0, 0, 0)] = 1.5;
        assert!(matches!(ImageGrid::new(arr, 1.0), Err(Error::Param(_))));
    }

    #[test]
    fn rejects_small_or_odd_channel_grids() {
        assert!(ImageGrid::new(Array3::zeros((4, 8, 1)), 1.0).is_err());
        assert!(ImageGrid::new(Array3::zeros((8, 8, 2)), 1.0).is_err());
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let pixels = Array3::from_shape_fn((16, 12, 1), |(y, x, _)| {
            f64::from((y * 12 + x) as u32 % 256) / 255.0
        });
        let img = ImageGrid::new(pixels, 255.0).unwrap();
        img.save_png(&path).unwrap();
        let back = ImageGrid::load_png(&path).unwrap();
        assert_eq!(back.pixels.dim(), (16, 12, 1));
        // 8-bit values divide 255 exactly, so the reload is bit-identical.
        assert_eq!(img.pixels, back.pixels);
        assert_eq!(back.dynamic_range, 255.0);
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let pixels = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            f64::from(((y * 8 + x) * 3 + c) as u32 % 256) / 255.0
        });
        let img = ImageGrid::new(pixels, 255.0).unwrap();
        img.save_png(&path).unwrap();
        let back = ImageGrid::load_png(&path).unwrap();
        assert_eq!(img.pixels, back.pixels);
    }
}
