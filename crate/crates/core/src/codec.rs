//! Exact image/latent codec.
//!
//! The codec stands in for a learned autoencoder: it maps an H×W×C image to
//! an (H/b)×(W/b)×(C·b²) latent by space-to-depth rearrangement, which is
//! lossless and makes every diffusion-layer test deterministic. A trained
//! autoencoder could later be slotted behind the same interface.
//!
//! Two range mappings are available. `Unit` keeps intensities in `[0,1]`
//! and round-trips bit-for-bit. `Centered` additionally applies the affine
//! map `y = 2x − 1` onto `[−1,1]`; that map cannot be inverted bit-exactly
//! in binary floating point (doubles in `[0, 1/4)` outnumber those in the
//! target interval `[−1, −1/2)`, so some must collide), so `Centered`
//! round-trips only to machine precision and `Unit` is the default.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// How latent values are scaled relative to image intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMap {
    /// Identity: latents live in `[0,1]`. Bit-exact round trip.
    Unit,
    /// Affine `[0,1] → [−1,1]`. Round trip exact to machine precision only.
    Centered,
}

/// Space-to-depth codec configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Codec {
    /// Side length of the square pixel blocks folded into channels.
    pub block: usize,
    pub range: RangeMap,
}

impl Default for Codec {
    fn default() -> Self {
        Self { block: 2, range: RangeMap::Unit }
    }
}

/// A latent array h×w×c with enough metadata to restore the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub values: Array3<f64>,
    /// (H, W, C) of the image this latent came from.
    pub source_shape: (usize, usize, usize),
    /// Dynamic range of the source image, restored on decode.
    pub source_dynamic_range: f64,
}

impl LatentGrid {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

impl Codec {
    pub fn centered(block: usize) -> Self {
        Self { block, range: RangeMap::Centered }
    }

    /// Latent shape for a given image shape: (H/b, W/b, C·b²).
    pub fn latent_shape(&self, image_shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (h, w, c) = image_shape;
        let b = self.block;
        if b == 0 {
            return Err(Error::Config("codec block size must be positive".into()));
        }
        if h % b != 0 || w % b != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by codec block size {b}"
            )));
        }
        Ok((h / b, w / b, c * b * b))
    }

    /// Rearrange an image into its latent. Deterministic and lossless.
    ///
    /// The pixel at image position (i·b + di, j·b + dj, ch) lands in latent
    /// cell (i, j, (di·b + dj)·C + ch).
    pub fn encode(&self, img: &ImageGrid) -> Result<LatentGrid> {
        let (h, w, c) = img.pixels.dim();
        let (lh, lw, lc) = self.latent_shape((h, w, c))?;
        let b = self.block;
        let mut values = Array3::zeros((lh, lw, lc));
        for i in 0..lh {
            for j in 0..lw {
                for di in 0..b {
                    for dj in 0..b {
                        for ch in 0..c {
                            let v = img.pixels[(i * b + di, j * b + dj, ch)];
                            values[(i, j, (di * b + dj) * c + ch)] = self.map_range(v);
                        }
                    }
                }
            }
        }
        Ok(LatentGrid {
            values,
            source_shape: (h, w, c),
            source_dynamic_range: img.dynamic_range,
        })
    }

    /// Invert [`Codec::encode`]. Output intensities are clamped to `[0,1]`,
    /// so latents pushed outside the codec range decode to valid images.
    pub fn decode(&self, z: &LatentGrid) -> Result<ImageGrid> {
        let (h, w, c) = z.source_shape;
        let (lh, lw, lc) = self.latent_shape((h, w, c)).map_err(|e| match e {
            Error::Config(m) => Error::Shape(m),
            other => other,
        })?;
        if z.values.dim() != (lh, lw, lc) {
            return Err(Error::Shape(format!(
                "latent shape {:?} inconsistent with source shape {:?} under block {}",
                z.values.dim(),
                z.source_shape,
                self.block
            )));
        }
        let b = self.block;
        let mut pixels = Array3::zeros((h, w, c));
        for i in 0..lh {
            for j in 0..lw {
                for di in 0..b {
                    for dj in 0..b {
                        for ch in 0..c {
                            let v = z.values[(i, j, (di * b + dj) * c + ch)];
                            pixels[(i * b + di, j * b + dj, ch)] =
                                self.unmap_range(v).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        ImageGrid::new(pixels, z.source_dynamic_range)
    }

    fn map_range(&self, v: f64) -> f64 {
        match self.range {
            RangeMap::Unit => v,
            RangeMap::Centered => 2.0 * v - 1.0,
        }
    }

    fn unmap_range(&self, v: f64) -> f64 {
        match self.range {
            RangeMap::Unit => v,
            RangeMap::Centered => (v + 1.0) / 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((h, w, c), |_| rng.gen::<f64>());
        ImageGrid::new(pixels, 1.0).unwrap()
    }

    #[test]
    fn shape_law_32x32x1_block2() {
        let codec = Codec::default();
        let img = random_image(32, 32, 1, 7);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), (16, 16, 4));
        let back = codec.decode(&z).unwrap();
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn all_zero_image_maps_to_constant_latent() {
        let img = ImageGrid::new(Array3::zeros((8, 8, 1)), 1.0).unwrap();
        let unit = Codec::default().encode(&img).unwrap();
        assert!(unit.values.iter().all(|&v| v == 0.0));
        let centered = Codec::centered(2).encode(&img).unwrap();
        assert!(centered.values.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn random_round_trip_is_bit_exact_for_default_codec() {
        let codec = Codec::default();
        for seed in 0..4 {
            let img = random_image(16, 16, 1, seed);
            let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
            assert_eq!(back.pixels, img.pixels);
            assert_eq!(back.dynamic_range, img.dynamic_range);
        }
    }

    #[test]
    fn centered_round_trip_is_machine_precision() {
        let codec = Codec::centered(2);
        let img = random_image(16, 16, 1, 11);
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn block_rearrangement_indexing_by_hand() {
        // Pixel values encode their own coordinates so each latent cell can
        // be checked against the documented index law.
        let pixels = Array3::from_shape_fn((8, 8, 1), |(y, x, _)| {
            (y as f64 * 8.0 + x as f64) / 100.0
        });
        let img = ImageGrid::new(pixels, 1.0).unwrap();
        let z = Codec::default().encode(&img).unwrap();
        // Latent cell (i=1, j=2) holds the 2x2 image block with corner (2,4):
        // channel order is (di, dj) = (0,0), (0,1), (1,0), (1,1).
        assert_eq!(z.values[(1, 2, 0)], (2.0 * 8.0 + 4.0) / 100.0);
        assert_eq!(z.values[(1, 2, 1)], (2.0 * 8.0 + 5.0) / 100.0);
        assert_eq!(z.values[(1, 2, 2)], (3.0 * 8.0 + 4.0) / 100.0);
        assert_eq!(z.values[(1, 2, 3)], (3.0 * 8.0 + 5.0) / 100.0);
    }

    #[test]
    fn out_of_range_latent_decodes_clamped() {
        let codec = Codec::default();
        let img = random_image(8, 8, 1, 3);
        let mut z = codec.encode(&img).unwrap();
        z.values.mapv_inplace(|v| v * 10.0 - 2.0);
        let back = codec.decode(&z).unwrap();
        assert!(back.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_shape_is_a_configuration_error() {
        let codec = Codec { block: 3, range: RangeMap::Unit };
        let img = random_image(8, 8, 1, 1);
        assert!(matches!(codec.encode(&img), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_latent_metadata_is_a_shape_error() {
        let codec = Codec::default();
        let img = random_image(8, 8, 1, 2);
        let mut z = codec.encode(&img).unwrap();
        z.source_shape = (16, 16, 1);
        assert!(matches!(codec.decode(&z), Err(Error::Shape(_))));
    }
}
