//! Image-quality and distribution metrics: SSIM, PSNR, FID, and the
//! Inception Score, plus the feature-extractor plumbing they share.
//!
//! SSIM is the global (whole-image) statistic over dynamic-range units, not
//! a sliding window. FID uses sample covariances and a symmetric
//! eigendecomposition for the matrix square root. Features come from any
//! [`FeatureExtractor`]; at desk scale that is the small convolutional
//! classifier's penultimate layer rather than a pretrained network, so
//! absolute FID and IS values are comparable only within this codebase.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// Eigenvalues of a covariance product this far below zero indicate the
/// inputs are broken rather than merely noisy.
const EIG_FLOOR: f64 = -1e-8;

/// Deterministic image-to-vector mapping used by FID and the score table.
pub trait FeatureExtractor {
    /// Stable identifier recorded in reports.
    fn id(&self) -> &str;
    /// Length of every feature vector.
    fn dim(&self) -> usize;
    /// Whether the extractor has been fitted; untrained extractors are
    /// rejected rather than silently producing noise features.
    fn is_trained(&self) -> bool;
    fn features(&self, image: &ImageGrid) -> Result<Vec<f64>>;
}

/// Feature vectors for a batch of images.
pub fn extract_features(
    images: &[ImageGrid],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Vec<f64>>> {
    if !extractor.is_trained() {
        return Err(Error::Config(format!(
            "feature extractor '{}' has not been trained",
            extractor.id()
        )));
    }
    images
        .iter()
        .map(|img| {
            let v = extractor.features(img)?;
            if v.len() != extractor.dim() {
                return Err(Error::Shape(format!(
                    "extractor '{}' produced {} values, declared dim {}",
                    extractor.id(),
                    v.len(),
                    extractor.dim()
                )));
            }
            Ok(v)
        })
        .collect()
}

fn check_pair(x: &ImageGrid, y: &ImageGrid) -> Result<()> {
    if x.pixels.dim() != y.pixels.dim() {
        return Err(Error::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            x.pixels.dim(),
            y.pixels.dim()
        )));
    }
    Ok(())
}

/// Global structural similarity over dynamic-range units, with
/// c1=(0.01 L)^2 and c2=(0.03 L)^2. Symmetric in its arguments and 1.0 for
/// identical images.
pub fn ssim(x: &ImageGrid, y: &ImageGrid) -> Result<f64> {
    check_pair(x, y)?;
    if (x.dynamic_range - y.dynamic_range).abs() > 1e-12 {
        return Err(Error::Param(format!(
            "dynamic ranges differ: {} vs {}",
            x.dynamic_range, y.dynamic_range
        )));
    }
    let scale = x.dynamic_range;
    let n = x.pixels.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for (&a, &b) in x.pixels.iter().zip(y.pixels.iter()) {
        mx += a * scale;
        my += b * scale;
    }
    mx /= n;
    my /= n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.pixels.iter().zip(y.pixels.iter()) {
        let da = a * scale - mx;
        let db = b * scale - my;
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let c1 = (0.01 * scale).powi(2);
    let c2 = (0.03 * scale).powi(2);
    Ok(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

/// Peak signal-to-noise ratio in dB over dynamic-range units. Identical
/// images report positive infinity.
pub fn psnr(x: &ImageGrid, y: &ImageGrid) -> Result<f64> {
    check_pair(x, y)?;
    let scale = x.dynamic_range;
    let n = x.pixels.len() as f64;
    let mse: f64 = x
        .pixels
        .iter()
        .zip(y.pixels.iter())
        .map(|(&a, &b)| ((a - b) * scale).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (scale * scale / mse).log10())
}

fn mean_and_cov(features: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let mut mean = DVector::zeros(dim);
    for row in features {
        for (i, &v) in row.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in features {
        let d = DVector::from_iterator(dim, row.iter().copied()) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Square root of a symmetric positive semidefinite matrix. Eigenvalues in
/// `[EIG_FLOOR, 0)` are clamped to zero; anything lower is an error.
fn sym_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < EIG_FLOOR {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v}, below {EIG_FLOOR}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Frechet distance between two Gaussians fitted to the feature sets:
/// ||mu_x - mu_g||^2 + Tr(Sx + Sg - 2 (Sx Sg)^{1/2}). The product root is
/// computed as sqrt(Sx^{1/2} Sg Sx^{1/2}), which is symmetric.
pub fn fid(real_features: &[Vec<f64>], gen_features: &[Vec<f64>]) -> Result<f64> {
    let dim = real_features
        .first()
        .or_else(|| gen_features.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Param("fid needs non-empty feature sets".into()))?;
    for (name, set) in [("real", real_features), ("generated", gen_features)] {
        // A rank-deficient covariance is fine: the trace-of-root term only needs
        // nonnegative eigenvalues, which the clamp below enforces. Two samples is
        // the minimum for the n-1 divisor.
        if set.len() < 2 {
            return Err(Error::Param(format!(
                "{name} set has {} samples; a covariance needs at least 2",
                set.len()
            )));
        }
        if set.iter().any(|row| row.len() != dim) {
            return Err(Error::Shape(format!("{name} set has rows of differing dims")));
        }
    }
    let (mu_x, cov_x) = mean_and_cov(real_features, dim);
    let (mu_g, cov_g) = mean_and_cov(gen_features, dim);
    let root_x = sym_sqrt(&cov_x, "real covariance")?;
    let inner = &root_x * &cov_g * &root_x;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let mut trace_root = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < EIG_FLOOR {
            return Err(Error::Numerical(format!(
                "covariance product has eigenvalue {v}, below {EIG_FLOOR}"
            )));
        }
        trace_root += v.max(0.0).sqrt();
    }
    let diff = &mu_x - &mu_g;
    Ok(diff.norm_squared() + cov_x.trace() + cov_g.trace() - 2.0 * trace_root)
}

/// exp of the mean KL divergence between each row and the empirical
/// marginal. Rows must be probability vectors.
pub fn inception_score(class_probs: &[Vec<f64>]) -> Result<f64> {
    if class_probs.is_empty() {
        return Err(Error::Param("inception score needs at least one probability row".into()));
    }
    let k = class_probs[0].len();
    for (i, row) in class_probs.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Shape(format!("probability row {i} has {} classes, expected {k}", row.len())));
        }
        if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "row {i} is not a probability vector (sum {})",
                row.iter().sum::<f64>()
            )));
        }
    }
    let n = class_probs.len() as f64;
    let mut marginal = vec![0.0; k];
    for row in class_probs {
        for (m, &p) in marginal.iter_mut().zip(row) {
            *m += p / n;
        }
    }
    let mut mean_kl = 0.0;
    for row in class_probs {
        for (&p, &q) in row.iter().zip(&marginal) {
            if p > 0.0 {
                mean_kl += p * (p.ln() - q.ln()) / n;
            }
        }
    }
    Ok(mean_kl.exp())
}

/// One line of the evaluation table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub class: String,
    pub fid: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub is: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

/// Per-class rows plus an aggregate, with the extractor recorded so scores
/// are never compared across feature spaces.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub extractor_id: String,
    pub rows: Vec<MetricsRow>,
    pub aggregate: MetricsRow,
}

impl MetricsReport {
    /// Aligned text table, one row per class and the aggregate last.
    pub fn render(&self) -> String {
        let mut out = format!(
            "extractor: {}\n{:<12} {:>10} {:>8} {:>9} {:>7} {:>7} {:>6}\n",
            self.extractor_id, "class", "fid", "ssim", "psnr_db", "is", "n_real", "n_gen"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            out.push_str(&format!(
                "{:<12} {:>10.4} {:>8.4} {:>9.3} {:>7.4} {:>7} {:>6}\n",
                row.class, row.fid, row.ssim, row.psnr, row.is, row.n_real, row.n_gen
            ));
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(value_255: f64) -> ImageGrid {
        ImageGrid::new(Array3::from_elem((8, 8, 1), value_255 / 255.0), 255.0).unwrap()
    }

    fn random_image(seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((8, 8, 1), |_| rng.gen::<f64>());
        ImageGrid::new(pixels, 255.0).unwrap()
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one() {
        let x = random_image(1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_match_hand_value() {
        let got = ssim(&constant(100.0), &constant(50.0)).unwrap();
        let expect = (2.0 * 100.0 * 50.0 + 6.5025) / (100.0_f64.powi(2) + 50.0_f64.powi(2) + 6.5025);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 0.8001).abs() < 1e-4);
    }

    #[test]
    fn ssim_rejects_mismatched_inputs() {
        let x = random_image(1);
        let y = ImageGrid::new(Array3::zeros((16, 16, 1)), 255.0).unwrap();
        assert!(matches!(ssim(&x, &y), Err(Error::Shape(_))));
        let z = ImageGrid::new(x.pixels.clone(), 128.0).unwrap();
        assert!(matches!(ssim(&x, &z), Err(Error::Param(_))));
    }

    #[test]
    fn psnr_identical_images_are_infinite() {
        let x = random_image(2);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_difference_matches_hand_value() {
        let got = psnr(&constant(32.0), &constant(48.0)).unwrap();
        let expect = 10.0 * (65025.0_f64 / 256.0).log10();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 24.048).abs() < 1e-3);
    }

    #[test]
    fn halving_mse_raises_psnr_by_three_db() {
        let x = constant(0.0);
        let full = psnr(&x, &constant(16.0)).unwrap();
        let mut half = x.pixels.clone();
        for ((r, _, _), v) in half.indexed_iter_mut() {
            if r % 2 == 0 {
                *v = 16.0 / 255.0;
            }
        }
        let halved = psnr(&x, &ImageGrid::new(half, 255.0).unwrap()).unwrap();
        assert!((halved - full - 10.0 * 2.0_f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn noise_degrades_psnr_monotonically_and_ssim_beyond_a_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = Array3::from_shape_fn((8, 8, 1), |_| 0.25 + 0.5 * rng.gen::<f64>());
        let x = ImageGrid::new(base, 255.0).unwrap();
        let noise = Array3::from_shape_fn((8, 8, 1), |_| rng.gen::<f64>() - 0.5);
        let mut prev_psnr = f64::INFINITY;
        let mut ssims = Vec::new();
        for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = ImageGrid::new(&x.pixels + &(&noise * sigma), 255.0).unwrap();
            let p = psnr(&x, &noisy).unwrap();
            assert!(p < prev_psnr, "psnr must fall as sigma grows");
            prev_psnr = p;
            ssims.push(ssim(&x, &noisy).unwrap());
        }
        for pair in ssims.windows(2).skip(1) {
            assert!(pair[1] < pair[0], "ssim must fall beyond the small-sigma floor");
        }
    }

    #[test]
    fn fid_identical_sets_are_zero() {
        let set: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        assert!(fid(&set, &set).unwrap().abs() < 1e-6);
    }

    #[test]
    fn fid_matches_one_dimensional_hand_values() {
        let x = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let shifted = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!((fid(&x, &shifted).unwrap() - 1.0).abs() < 1e-9);

        let wide = vec![vec![-2.0], vec![0.0], vec![2.0]];
        assert!((fid(&x, &wide).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fid_is_symmetric_and_rejects_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..8).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-9);
        assert!(ab >= -1e-9);
        assert!(matches!(fid(&a[..1], &b), Err(Error::Param(_))));
    }

    #[test]
    fn fid_handles_rank_deficient_covariances() {
        // Two samples of dim 3 give a rank-1 covariance. The distance must
        // still come out finite and match the hand value: means (0,0,0) and
        // (2,0,0), each covariance 2 * e1 e1^T, so the trace terms cancel and
        // only the mean gap of 4 remains.
        let a = vec![vec![-1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let b = vec![vec![1.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]];
        let d = fid(&a, &b).unwrap();
        assert!((d - 4.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn inception_score_hand_values() {
        let uniform = vec![vec![0.25; 4]; 5];
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);

        let one_hot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((inception_score(&one_hot).unwrap() - 2.0).abs() < 1e-12);

        let bad = vec![vec![0.9, 0.2]];
        assert!(matches!(inception_score(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn report_renders_every_row() {
        let row = MetricsRow {
            class: "ship".into(),
            fid: 1.5,
            ssim: 0.9,
            psnr: 20.0,
            is: 1.2,
            n_real: 10,
            n_gen: 10,
        };
        let report = MetricsReport {
            extractor_id: "clf-64".into(),
            rows: vec![row.clone()],
            aggregate: MetricsRow { class: "all".into(), ..row },
        };
        let text = report.render();
        assert!(text.contains("ship") && text.contains("all") && text.contains("clf-64"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn ssim_is_symmetric(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let x = random_image(seed_a);
            let y = random_image(seed_b);
            let xy = ssim(&x, &y).unwrap();
            let yx = ssim(&y, &x).unwrap();
            prop_assert!((xy - yx).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&xy));
        }

        #[test]
        fn inception_score_is_at_least_one(rows in proptest::collection::vec(
            proptest::collection::vec(0.01f64..1.0, 3), 1..6)) {
            let normalized: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(|v| v / s).collect()
                })
                .collect();
            prop_assert!(inception_score(&normalized).unwrap() >= 1.0 - 1e-9);
        }
    }
}
