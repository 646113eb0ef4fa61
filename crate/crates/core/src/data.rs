//! Dataset manifests, deterministic splits, a synthetic sonar corpus
//! generator, and the caption-dataset builder.
//!
//! A manifest is a JSON file listing images relative to its own directory,
//! each with a class label, a provenance marker, and optional low/high
//! captions. The toy generator produces a self-contained 32x32 grayscale
//! corpus with known ground truth: multiplicative speckle, one bright
//! class-shaped target, and a dark shadow displaced along a sampled beam
//! direction. Every per-image parameter is logged so tests can check the
//! rendered images against an independent oracle.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::image::ImageGrid;

/// Classes the toy generator knows how to draw, sorted.
pub const TOY_LABELS: [&str; 4] = ["mine", "plane", "seafloor", "ship"];

/// Speckle intensities never exceed this, keeping background strictly
/// separable from target returns (which stay at or above 0.70).
pub const SPECKLE_CEIL: f64 = 0.65;

const SPECKLE_SCALE: f64 = 0.15;
const SHADOW_GAIN: f64 = 0.3;
const MIN_TOY_SIDE: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Simulated,
    StyleInjected,
    Generated,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_low: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_high: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// The declared label set; every entry's label must be one of these.
    pub labels: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Absolute path of one entry's image.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Duplicate-path, label-set, and file-existence checks. Reports every
    /// offender, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut duplicates = Vec::new();
        let mut unknown_labels = Vec::new();
        let mut unreadable = Vec::new();
        for entry in &self.entries {
            if !seen.insert(entry.path.as_str()) {
                duplicates.push(entry.path.clone());
            }
            if !self.labels.iter().any(|l| l == &entry.label) {
                unknown_labels.push(format!("{} ({})", entry.path, entry.label));
            }
            if !self.resolve(entry).is_file() {
                unreadable.push(entry.path.clone());
            }
        }
        let mut problems = Vec::new();
        if !duplicates.is_empty() {
            problems.push(format!("duplicate paths: {}", duplicates.join(", ")));
        }
        if !unknown_labels.is_empty() {
            problems.push(format!("labels outside the declared set: {}", unknown_labels.join(", ")));
        }
        if !unreadable.is_empty() {
            problems.push(format!("unreadable images: {}", unreadable.join(", ")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Ingestion(problems.join("; ")))
        }
    }

    /// Entry count per label, for reporting and tests.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for entry in &self.entries {
            *counts.entry(entry.label.clone()).or_insert(0) += 1;
        }
        counts
    }
}

/// Read and validate a manifest; referenced images must exist on disk.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    manifest.validate()?;
    Ok(manifest)
}

/// Write a manifest as pretty JSON via a temp file and atomic rename.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(manifest)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Integer allocation of `total` across `fractions` by largest remainder.
/// Ties go to the earlier position.
fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Label-stratified split into train/val/test. Disjoint and exhaustive;
/// within each label the assignment is a seeded shuffle followed by a
/// largest-remainder allocation of the ratios.
pub fn split(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|&r| r <= 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "split ratios must be positive and sum to 1, got {parts:?}"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        groups.entry(entry.label.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (label, mut indices) in groups {
        if indices.len() < 3 {
            return Err(Error::Stratification(format!(
                "label '{label}' has {} entries, fewer than the 3 split parts",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let counts = largest_remainder(indices.len(), &parts);
        let mut cursor = 0;
        for (part, &count) in counts.iter().enumerate() {
            picks[part].extend(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    let take = |indices: &mut Vec<usize>| {
        indices.sort_unstable();
        DatasetManifest {
            version: manifest.version,
            labels: manifest.labels.clone(),
            entries: indices.iter().map(|&i| manifest.entries[i].clone()).collect(),
            base_dir: manifest.base_dir.clone(),
        }
    };
    let [mut a, mut b, mut c] = picks;
    Ok((take(&mut a), take(&mut b), take(&mut c)))
}

/// Ground-truth record written to `genlog.jsonl`, one line per image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenRecord {
    pub index: usize,
    pub path: String,
    pub label: String,
    pub bg_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obj_tag: Option<String>,
    /// Target centroid in (row, col) pixels; absent for seafloor images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centroid: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brightness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_angle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shadow_offset: Option<f64>,
    pub max_pixel: f64,
}

fn object_prefix(label: &str) -> Option<&'static str> {
    match label {
        "ship" => Some("SH"),
        "plane" => Some("PL"),
        "mine" => Some("CYM"),
        _ => None,
    }
}

/// Pixels covered by one target shape, row-major, all inside the frame
/// given the margins enforced on the center.
fn shape_pixels(
    label: &str,
    center: (f64, f64),
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let (ci, cj) = center;
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (cos_p, sin_p) = (phi.cos(), phi.sin());
    let inside: Box<dyn Fn(f64, f64) -> bool> = match label {
        "ship" => {
            let a: f64 = rng.gen_range(4.0..6.0);
            let b: f64 = rng.gen_range(2.0..3.0);
            Box::new(move |u, v| (u / a).powi(2) + (v / b).powi(2) <= 1.0)
        }
        "plane" => {
            let l: f64 = rng.gen_range(4.0..6.0);
            let w: f64 = rng.gen_range(1.0..1.5);
            Box::new(move |u, v| (u.abs() <= l && v.abs() <= w) || (v.abs() <= l && u.abs() <= w))
        }
        "mine" => {
            let l: f64 = rng.gen_range(3.0..5.0);
            let w: f64 = rng.gen_range(1.0..2.0);
            Box::new(move |u, v| u.abs() <= l && v.abs() <= w)
        }
        _ => unreachable!("seafloor draws no shape"),
    };
    let mut pixels = Vec::new();
    let lo = |c: f64| (c - 8.0).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + 8.0).ceil() as usize).min(side - 1);
    for i in lo(ci)..=hi(ci) {
        for j in lo(cj)..=hi(cj) {
            let di = i as f64 - ci;
            let dj = j as f64 - cj;
            let u = di * cos_p + dj * sin_p;
            let v = -di * sin_p + dj * cos_p;
            if inside(u, v) {
                pixels.push((i, j));
            }
        }
    }
    pixels
}

/// Render a synthetic sonar corpus: `n` PNG images under
/// `out_dir/images/`, a `genlog.jsonl` ground-truth log, and a
/// `manifest.json`. Deterministic per seed. `class_mix` maps labels from
/// [`TOY_LABELS`] to fractions summing to one; counts follow the
/// largest-remainder rule.
pub fn generate_toy_sonar(
    n: usize,
    seed: u64,
    class_mix: &BTreeMap<String, f64>,
    side: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Param("toy corpus needs n >= 1".into()));
    }
    if side < MIN_TOY_SIDE {
        return Err(Error::Param(format!("toy image side must be >= {MIN_TOY_SIDE}, got {side}")));
    }
    if class_mix.is_empty() {
        return Err(Error::Param("class mix must name at least one label".into()));
    }
    for (label, &fraction) in class_mix {
        if !TOY_LABELS.contains(&label.as_str()) {
            return Err(Error::Param(format!(
                "unknown class '{label}'; toy labels are {TOY_LABELS:?}"
            )));
        }
        if fraction < 0.0 {
            return Err(Error::Param(format!("class '{label}' has negative fraction {fraction}")));
        }
    }
    let total: f64 = class_mix.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!("class fractions must sum to 1, got {total}")));
    }

    let labels: Vec<String> = class_mix.keys().cloned().collect();
    let fractions: Vec<f64> = class_mix.values().copied().collect();
    let counts = largest_remainder(n, &fractions);
    let mut per_image_label = Vec::with_capacity(n);
    for (label, &count) in labels.iter().zip(&counts) {
        per_image_label.extend(std::iter::repeat(label.clone()).take(count));
    }

    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut log = std::fs::File::create(out_dir.join("genlog.jsonl"))?;
    let mut entries = Vec::with_capacity(n);

    for (i, label) in per_image_label.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));

        let bg_prefix =
            crate::text::BACKGROUND_PREFIXES[rng.gen_range(0..crate::text::BACKGROUND_PREFIXES.len())];
        let bg_tag = format!("{bg_prefix}{}*", rng.gen_range(1..=999u32));

        let mut pixels = Array3::zeros((side, side, 1));
        for r in 0..side {
            for c in 0..side {
                let e: f64 = rng.sample(Exp1);
                pixels[(r, c, 0)] = (SPECKLE_SCALE * e).min(SPECKLE_CEIL);
            }
        }

        let mut record = GenRecord {
            index: i,
            path: format!("images/img_{i:04}.png"),
            label: label.clone(),
            bg_tag: bg_tag.clone(),
            obj_tag: None,
            centroid: None,
            brightness: None,
            beam_angle: None,
            shadow_offset: None,
            max_pixel: 0.0,
        };
        let caption_low;
        if let Some(prefix) = object_prefix(label) {
            let obj_tag = format!("{prefix}{}*", rng.gen_range(1..=99u32));
            let margin = 10.0;
            let ci: f64 = rng.gen_range(margin..side as f64 - margin);
            let cj: f64 = rng.gen_range(margin..side as f64 - margin);
            let beam: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let offset: f64 = rng.gen_range(4.0..7.0);
            let brightness: f64 = rng.gen_range(0.75..0.95);
            let mask = shape_pixels(label, (ci, cj), side, &mut rng);

            let shadow: BTreeSet<(usize, usize)> = mask
                .iter()
                .filter_map(|&(r, c)| {
                    let sr = (r as f64 + offset * beam.cos()).round();
                    let sc = (c as f64 + offset * beam.sin()).round();
                    (sr >= 0.0 && sc >= 0.0 && sr < side as f64 && sc < side as f64)
                        .then(|| (sr as usize, sc as usize))
                })
                .collect();
            for &(r, c) in &shadow {
                pixels[(r, c, 0)] *= SHADOW_GAIN;
            }
            for &(r, c) in &mask {
                pixels[(r, c, 0)] = brightness - 0.05 * rng.gen::<f64>();
            }

            let m = mask.len() as f64;
            let centroid = mask
                .iter()
                .fold((0.0, 0.0), |acc, &(r, c)| (acc.0 + r as f64 / m, acc.1 + c as f64 / m));
            record.obj_tag = Some(obj_tag.clone());
            record.centroid = Some(centroid);
            record.brightness = Some(brightness);
            record.beam_angle = Some(beam);
            record.shadow_offset = Some(offset);
            caption_low = format!("image of {obj_tag} on the {bg_tag} seabed");
        } else {
            caption_low = format!("image of the {bg_tag} seabed");
        }
        record.max_pixel = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        let image = ImageGrid::new(pixels, 255.0)?;
        image.save_png(&out_dir.join(&record.path))?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        entries.push(ManifestEntry {
            path: record.path.clone(),
            label: label.clone(),
            source: Source::Simulated,
            caption_low: Some(caption_low),
            caption_high: None,
        });
    }

    let manifest =
        DatasetManifest { version: 1, labels, entries, base_dir: out_dir.to_path_buf() };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Read the ground-truth log emitted by [`generate_toy_sonar`].
pub fn load_genlog(out_dir: &Path) -> Result<Vec<GenRecord>> {
    let text = std::fs::read_to_string(out_dir.join("genlog.jsonl"))?;
    text.lines().map(|line| Ok(serde_json::from_str(line)?)).collect()
}

/// Images from a manifest encoded into latents, with their captions, ready
/// for the training loop.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub latents: Vec<Array3<f64>>,
    pub captions_low: Vec<String>,
    pub captions_high: Vec<Option<String>>,
    pub latent_shape: (usize, usize, usize),
    pub source_shape: (usize, usize, usize),
    pub dynamic_range: f64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Load every manifest image and encode it. All images must share one
/// shape; entries without a low caption train unconditionally.
pub fn load_training_set(manifest: &DatasetManifest, codec: &Codec) -> Result<TrainingSet> {
    if manifest.entries.is_empty() {
        return Err(Error::Ingestion("manifest has no entries to train on".into()));
    }
    let mut latents = Vec::with_capacity(manifest.entries.len());
    let mut captions_low = Vec::new();
    let mut captions_high = Vec::new();
    let mut latent_shape = None;
    let mut source_shape = (0, 0, 0);
    let mut dynamic_range = 0.0;
    let mut failures = Vec::new();
    for entry in &manifest.entries {
        let image = match ImageGrid::load_png(&manifest.resolve(entry)) {
            Ok(img) => img,
            Err(e) => {
                failures.push(format!("{}: {e}", entry.path));
                continue;
            }
        };
        let latent = codec.encode(&image)?;
        let shape = latent.values.dim();
        match latent_shape {
            None => {
                latent_shape = Some(shape);
                source_shape = image.pixels.dim();
                dynamic_range = image.dynamic_range;
            }
            Some(expect) if expect != shape => {
                return Err(Error::Shape(format!(
                    "image {} encodes to latent {:?}, expected {:?}",
                    entry.path, shape, expect
                )));
            }
            Some(_) => {}
        }
        latents.push(latent.values);
        captions_low.push(entry.caption_low.clone().unwrap_or_default());
        captions_high.push(entry.caption_high.clone());
    }
    if !failures.is_empty() {
        return Err(Error::Ingestion(format!("unreadable images: {}", failures.join("; "))));
    }
    Ok(TrainingSet {
        latents,
        captions_low,
        captions_high,
        latent_shape: latent_shape.expect("non-empty manifest"),
        source_shape,
        dynamic_range,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CaptionFailure {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct CaptionReport {
    pub manifest: DatasetManifest,
    pub failures: Vec<CaptionFailure>,
}

/// Caption every manifest image through the gateway: a low-level
/// description of the pixels, then a high-level summary of it. Per-entry
/// failures are recorded and skipped rather than aborting the batch; the
/// output manifest's version is incremented.
pub fn build_caption_dataset(
    manifest: &DatasetManifest,
    gateway: &mut Gateway,
    domain_prompt: &str,
) -> Result<CaptionReport> {
    let mut out = manifest.clone();
    out.version = manifest.version.saturating_add(1);
    let mut failures = Vec::new();
    for entry in &mut out.entries {
        let path = entry.path.clone();
        let result = (|| -> Result<(String, String)> {
            let image = ImageGrid::load_png(&manifest.base_dir.join(&path))?;
            let prompt = match &entry.caption_low {
                Some(caption) => format!("{domain_prompt} Known annotation: {caption}"),
                None => domain_prompt.to_string(),
            };
            let low = gateway.describe_low_level(&image, &prompt)?;
            let high = gateway.elevate_to_high_level(&low)?;
            Ok((low, high))
        })();
        match result {
            Ok((low, high)) => {
                entry.caption_low = Some(low);
                entry.caption_high = Some(high);
            }
            Err(e) => failures.push(CaptionFailure { path, error: e.to_string() }),
        }
    }
    Ok(CaptionReport { manifest: out, failures })
}
