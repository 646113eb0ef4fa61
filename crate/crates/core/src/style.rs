//! Image-to-image style transfer and style-exemplar selection.
//!
//! The transfer itself ([`stylize`]) inverts both images to noise, then
//! re-samples the content noise while target attention layers read K/V from
//! the style run and blend their queries with the content run's queries.
//! Exemplar selection clusters dataset images with K-means and picks the
//! images nearest each centroid.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Codec;
use crate::data::DatasetManifest;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::attention::{AttentionMode, AttentionTrace, InjectRecord, RunTag};
use crate::sampler::{ddim_sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Blending knob and layer targeting for one stylize run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StyleBlendConfig {
    pub gamma: f64,
    /// Attention layers that receive injected features. Empty means the
    /// denoiser's default set (all self-attention layers).
    #[serde(default)]
    pub target_layers: BTreeSet<String>,
    pub sampler_cfg: SamplerConfig,
}

impl StyleBlendConfig {
    pub const DEFAULT_GAMMA: f64 = 0.5;

    pub fn new(gamma: f64, sampler_cfg: SamplerConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
            return Err(Error::Param(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(Self { gamma, target_layers: BTreeSet::new(), sampler_cfg })
    }
}

/// `γ·Q_content + (1−γ)·Q_stylized`, with exact endpoints: γ=1 returns the
/// content queries unchanged and γ=0 the stylized-run queries unchanged, so
/// endpoint assertions can compare bits rather than tolerances.
pub fn blend_queries(
    q_content: &Array2<f64>,
    q_stylized: &Array2<f64>,
    gamma: f64,
) -> Result<Array2<f64>> {
    if q_content.dim() != q_stylized.dim() {
        return Err(Error::Shape(format!(
            "query shapes differ: content {:?} vs stylized {:?}",
            q_content.dim(),
            q_stylized.dim()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(Error::Param(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(if gamma == 1.0 {
        q_content.clone()
    } else if gamma == 0.0 {
        q_stylized.clone()
    } else {
        gamma * q_content + (1.0 - gamma) * q_stylized
    })
}

/// Result of one Lloyd's-algorithm run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// k×d centroid matrix.
    pub centroids: Array2<f64>,
    /// Cluster index per input row.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
    /// Inertia after each completed iteration, for monotonicity checks.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: &Array1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (ci, c) in centroids.outer_iter().enumerate() {
        let d = point.iter().zip(c.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        if d < best.1 {
            best = (ci, d);
        }
    }
    best
}

/// Lloyd's algorithm with seeded k-means++ initialization. Deterministic
/// given the seed; converges when assignments stop changing.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KmeansResult> {
    let n = points.nrows();
    let d = points.ncols();
    if k == 0 || k > n {
        return Err(Error::Param(format!(
            "cluster count {k} must lie in 1..={n} for {n} points"
        )));
    }

    // k-means++ seeding: first centroid uniform, then proportional to the
    // squared distance from the nearest chosen centroid. Plain uniform
    // seeding can place two centroids in one blob and converge to a split
    // that never separates well-separated groups.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, d));
    centroids.row_mut(0).assign(&points.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(&p.to_owned(), &centroids.row(0).to_owned()))
        .collect();
    for ci in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with chosen centroids; any pick works.
            rng.gen_range(0..n)
        };
        centroids.row_mut(ci).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            let nd = sq_dist(&p.to_owned(), &points.row(pick).to_owned());
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.outer_iter().enumerate() {
            let (ci, dist) = nearest_centroid(&p.to_owned(), &centroids);
            inertia += dist;
            if assignments[i] != ci {
                assignments[i] = ci;
                changed = true;
            }
        }
        inertia_history.push(inertia);

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, p) in points.outer_iter().enumerate() {
            let ci = assignments[i];
            counts[ci] += 1;
            let mut row = sums.row_mut(ci);
            row += &p;
        }
        for ci in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[ci] > 0 {
                let mean = &sums.row(ci) / counts[ci] as f64;
                centroids.row_mut(ci).assign(&mean);
            }
        }
        if !changed && iterations > 1 {
            break;
        }
    }

    let inertia = points
        .outer_iter()
        .enumerate()
        .map(|(i, p)| sq_dist(&p.to_owned(), &centroids.row(assignments[i]).to_owned()))
        .sum();
    Ok(KmeansResult { centroids, assignments, inertia, inertia_history, iterations })
}

/// Feature vector for clustering: channel-averaged image resized to 16×16
/// by block averaging, flattened row-major to 256 values.
pub fn clustering_features(img: &ImageGrid) -> Array1<f64> {
    const SIDE: usize = 16;
    let (h, w, c) = img.pixels.dim();
    let mut out = Array1::zeros(SIDE * SIDE);
    for ti in 0..SIDE {
        let i0 = ti * h / SIDE;
        let i1 = ((ti + 1) * h / SIDE).max(i0 + 1);
        for tj in 0..SIDE {
            let j0 = tj * w / SIDE;
            let j1 = ((tj + 1) * w / SIDE).max(j0 + 1);
            let mut sum = 0.0;
            for i in i0..i1.min(h) {
                for j in j0..j1.min(w) {
                    for ch in 0..c {
                        sum += img.pixels[(i, j, ch)];
                    }
                }
            }
            let count = (i1.min(h) - i0) * (j1.min(w) - j0) * c;
            out[ti * SIDE + tj] = sum / count as f64;
        }
    }
    out
}

/// Cluster the manifest's images and return `per_cluster` paths nearest each
/// centroid, ordered by (cluster, distance, manifest position).
pub fn select_style_images(
    manifest: &DatasetManifest,
    k: usize,
    per_cluster: usize,
    seed: u64,
) -> Result<Vec<std::path::PathBuf>> {
    if !(1..=3).contains(&per_cluster) {
        return Err(Error::Param(format!("per_cluster must lie in 1..=3, got {per_cluster}")));
    }
    let n = manifest.entries.len();
    if k == 0 || k > n {
        return Err(Error::Param(format!(
            "cluster count {k} must lie in 1..={n} for a manifest of {n} entries"
        )));
    }
    let mut features = Array2::zeros((n, 16 * 16));
    for (i, entry) in manifest.entries.iter().enumerate() {
        let img = ImageGrid::load_png(&manifest.resolve(entry))?;
        features.row_mut(i).assign(&clustering_features(&img));
    }
    let result = kmeans(&features, k, seed, KMEANS_MAX_ITERS)?;

    let mut selected = Vec::new();
    for ci in 0..k {
        let mut members: Vec<(f64, usize)> = (0..n)
            .filter(|&i| result.assignments[i] == ci)
            .map(|i| {
                let dist = sq_dist(&features.row(i).to_owned(), &result.centroids.row(ci).to_owned());
                (dist, i)
            })
            .collect();
        members.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, i) in members.iter().take(per_cluster) {
            selected.push(manifest.resolve(&manifest.entries[i]));
        }
    }
    Ok(selected)
}

/// Everything a stylize run produces besides the image itself.
#[derive(Debug)]
pub struct StylizeReport {
    pub image: ImageGrid,
    pub gamma: f64,
    pub ssim_vs_content: f64,
    pub psnr_vs_content: f64,
    /// Blended-query records from the injection pass.
    pub inject_log: Vec<InjectRecord>,
    /// Content-run trace (reconstruction pass of the inverted content).
    pub content_trace: Arc<AttentionTrace>,
}

/// Captured traces plus the noise latents they came from, reusable across
/// several gamma values for the same content/style pair.
pub struct PreparedPair {
    pub content_noise: ndarray::Array3<f64>,
    pub content_trace: Arc<AttentionTrace>,
    pub style_trace: Arc<AttentionTrace>,
    content_shape: (usize, usize, usize),
    content_range: f64,
}

/// Invert content and style to noise and capture the attention features the
/// injection pass will read. Queries and K/V are taken from reconstruction
/// passes (deterministic reverse DDIM from each image's inverted noise) so
/// that at γ=1 with style == content the injected features are exactly the
/// ones the plain reconstruction would compute.
pub fn prepare_pair(
    content: &ImageGrid,
    style: &ImageGrid,
    cfg: &StyleBlendConfig,
    codec: &Codec,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
) -> Result<PreparedPair> {
    let z_content = codec.encode(content)?;
    let z_style = codec.encode(style)?;

    let (content_noise, _) =
        crate::sampler::ddim_invert(&z_content.values, denoiser, schedule, &cfg.sampler_cfg, "", false)?;
    let (style_noise, _) =
        crate::sampler::ddim_invert(&z_style.values, denoiser, schedule, &cfg.sampler_cfg, "", false)?;

    let targets = effective_targets(denoiser, cfg);
    let content_trace = capture_reconstruction(
        &content_noise,
        RunTag::Content,
        &targets,
        denoiser,
        schedule,
        &cfg.sampler_cfg,
    )?;
    let style_trace = capture_reconstruction(
        &style_noise,
        RunTag::Style,
        &targets,
        denoiser,
        schedule,
        &cfg.sampler_cfg,
    )?;

    Ok(PreparedPair {
        content_noise,
        content_trace: Arc::new(content_trace),
        style_trace: Arc::new(style_trace),
        content_shape: z_content.source_shape,
        content_range: z_content.source_dynamic_range,
    })
}

fn effective_targets(denoiser: &Denoiser, cfg: &StyleBlendConfig) -> BTreeSet<String> {
    if cfg.target_layers.is_empty() {
        denoiser.self_attention_layer_ids().into_iter().collect()
    } else {
        cfg.target_layers.clone()
    }
}

fn capture_reconstruction(
    noise: &ndarray::Array3<f64>,
    run_tag: RunTag,
    targets: &BTreeSet<String>,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
) -> Result<AttentionTrace> {
    denoiser.set_attention_mode(AttentionMode::Capture {
        target_layers: Some(targets.clone()),
        trace: AttentionTrace::new(run_tag),
    })?;
    let run = ddim_sample(noise.clone(), denoiser, schedule, sampler_cfg, "");
    let mode = denoiser.set_attention_mode(AttentionMode::Normal)?;
    run?;
    match mode {
        AttentionMode::Capture { trace, .. } => Ok(trace),
        _ => Err(Error::Config("capture mode was replaced mid-run".into())),
    }
}

/// Run the injection pass for one gamma against already-captured traces.
pub fn stylize_prepared(
    pair: &PreparedPair,
    content: &ImageGrid,
    gamma: f64,
    cfg: &StyleBlendConfig,
    codec: &Codec,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
) -> Result<StylizeReport> {
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(Error::Param(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let targets = effective_targets(denoiser, cfg);
    denoiser.set_attention_mode(AttentionMode::Inject {
        gamma,
        target_layers: targets,
        content: pair.content_trace.clone(),
        style: pair.style_trace.clone(),
        log: Vec::new(),
    })?;
    // The stylized run starts from the content's inverted noise.
    let run = ddim_sample(pair.content_noise.clone(), denoiser, schedule, &cfg.sampler_cfg, "");
    let mode = denoiser.set_attention_mode(AttentionMode::Normal)?;
    let z_out = run?;
    let inject_log = match mode {
        AttentionMode::Inject { log, .. } => log,
        _ => return Err(Error::Config("inject mode was replaced mid-run".into())),
    };

    let latent = crate::codec::LatentGrid {
        values: z_out,
        source_shape: pair.content_shape,
        source_dynamic_range: pair.content_range,
    };
    let image = codec.decode(&latent)?;
    let ssim_vs_content = crate::metrics::ssim(&image, content)?;
    let psnr_vs_content = crate::metrics::psnr(&image, content)?;
    Ok(StylizeReport {
        image,
        gamma,
        ssim_vs_content,
        psnr_vs_content,
        inject_log,
        content_trace: pair.content_trace.clone(),
    })
}

/// Full image-to-image transfer: invert both images, capture features,
/// re-sample the content noise with style K/V and blended queries.
/// Deterministic given inputs and the loaded checkpoint.
pub fn stylize(
    content: &ImageGrid,
    style: &ImageGrid,
    cfg: &StyleBlendConfig,
    codec: &Codec,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
) -> Result<StylizeReport> {
    let pair = prepare_pair(content, style, cfg, codec, denoiser, schedule)?;
    stylize_prepared(&pair, content, cfg.gamma, cfg, codec, denoiser, schedule)
}
