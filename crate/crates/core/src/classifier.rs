//! A small convolutional classifier for grayscale sonar tiles.
//!
//! Two conv blocks feed a 64-wide penultimate layer and a linear head. The
//! penultimate activations double as the feature space for FID and the
//! Inception Score, standing in for a large pretrained network at desk
//! scale. `classify_eval` is the synthetic-data harness: it trains one
//! classifier per provenance combination (real, synthetic, real+synthetic)
//! and reports test accuracy for each.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::data::{DatasetManifest, Source};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::metrics::FeatureExtractor;
use crate::nn::ops::{avg_pool2, avg_pool2_backward, silu, silu_backward, Conv2d, ConvCache, Linear};
use crate::nn::{GradStore, SgdMomentum};

/// Width of the penultimate layer, and therefore of extracted features.
pub const FEATURE_DIM: usize = 64;

const CONV1_WIDTH: usize = 16;
const CONV2_WIDTH: usize = 32;
const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub n_classes: usize,
    /// Input images are square with this side, divisible by 4.
    pub input_side: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            input_side: 32,
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if self.input_side == 0 || self.input_side % 4 != 0 {
            return Err(Error::Config(format!(
                "input side must be a positive multiple of 4, got {}",
                self.input_side
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

struct ClfCache {
    c1_cache: ConvCache,
    c1_out: Array3<f64>,
    c2_cache: ConvCache,
    c2_out: Array3<f64>,
    flat: Array2<f64>,
    pre: Array2<f64>,
    feat: Array2<f64>,
}

#[derive(Clone)]
pub struct SmallClassifier {
    pub config: ClassifierConfig,
    /// Sorted label names; logit column i corresponds to labels[i].
    pub labels: Vec<String>,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    head: Linear,
    trained: bool,
}

impl SmallClassifier {
    pub fn new(config: ClassifierConfig, labels: Vec<String>) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.n_classes {
            return Err(Error::Config(format!(
                "{} labels for {} classes",
                labels.len(),
                config.n_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s4 = config.input_side / 4;
        let flat_dim = CONV2_WIDTH * s4 * s4;
        Ok(Self {
            conv1: Conv2d::kaiming("clf.conv1", 1, CONV1_WIDTH, 3, &mut rng),
            conv2: Conv2d::kaiming("clf.conv2", CONV1_WIDTH, CONV2_WIDTH, 3, &mut rng),
            fc: Linear::new("clf.fc", flat_dim, FEATURE_DIM, true, (2.0 / flat_dim as f64).sqrt(), &mut rng),
            head: Linear::new("clf.head", FEATURE_DIM, config.n_classes, true, (2.0 / FEATURE_DIM as f64).sqrt(), &mut rng),
            config,
            labels,
            trained: false,
        })
    }

    fn check_input(&self, image: &ImageGrid) -> Result<Array3<f64>> {
        let (h, w, c) = image.pixels.dim();
        let s = self.config.input_side;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "classifier expects {s}x{s} single-channel images, got {h}x{w}x{c}"
            )));
        }
        let mut x = Array3::zeros((1, s, s));
        for ((i, j, _), &v) in image.pixels.indexed_iter() {
            x[(0, i, j)] = v;
        }
        Ok(x)
    }

    fn forward(&self, x: &Array3<f64>) -> (Array2<f64>, ClfCache) {
        let s = self.config.input_side;
        let (c1_out, c1_cache) = self.conv1.forward(x);
        let p1 = avg_pool2(&silu(&c1_out));
        let (c2_out, c2_cache) = self.conv2.forward(&p1);
        let p2 = avg_pool2(&silu(&c2_out));
        let s4 = s / 4;
        let mut flat = Array2::zeros((1, CONV2_WIDTH * s4 * s4));
        for ((ch, i, j), &v) in p2.indexed_iter() {
            flat[(0, (ch * s4 + i) * s4 + j)] = v;
        }
        let pre = self.fc.forward(&flat);
        let feat = silu(&pre);
        let logits = self.head.forward(&feat);
        (logits, ClfCache { c1_cache, c1_out, c2_cache, c2_out, flat, pre, feat })
    }

    fn backward(&self, cache: &ClfCache, d_logits: &Array2<f64>, grads: &mut GradStore) {
        let s = self.config.input_side;
        let s4 = s / 4;
        let d_feat = self.head.backward(&cache.feat, d_logits, grads);
        let d_pre = silu_backward(&cache.pre, &d_feat);
        let d_flat = self.fc.backward(&cache.flat, &d_pre, grads);
        let mut d_p2 = Array3::zeros((CONV2_WIDTH, s4, s4));
        for ((ch, i, j), v) in d_p2.indexed_iter_mut() {
            *v = d_flat[(0, (ch * s4 + i) * s4 + j)];
        }
        let d_a2 = avg_pool2_backward(&d_p2, s / 2, s / 2);
        let d_c2 = silu_backward(&cache.c2_out, &d_a2);
        let d_p1 = self.conv2.backward(&cache.c2_cache, &d_c2, grads);
        let d_a1 = avg_pool2_backward(&d_p1, s, s);
        let d_c1 = silu_backward(&cache.c1_out, &d_a1);
        self.conv1.backward(&cache.c1_cache, &d_c1, grads);
    }

    fn softmax_row(logits: &Array2<f64>) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Class probabilities for one image, in `labels` order.
    pub fn predict_probs(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        let x = self.check_input(image)?;
        let (logits, _) = self.forward(&x);
        Ok(Self::softmax_row(&logits))
    }

    /// Index into `labels` of the most probable class.
    pub fn predict(&self, image: &ImageGrid) -> Result<usize> {
        let probs = self.predict_probs(image)?;
        Ok(probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap())
    }

    /// Minibatch SGD with momentum on the softmax cross-entropy. Returns
    /// the mean loss per epoch. Label ids index into `labels`.
    pub fn train(&mut self, images: &[ImageGrid], label_ids: &[usize]) -> Result<Vec<f64>> {
        if images.is_empty() || images.len() != label_ids.len() {
            return Err(Error::Param(format!(
                "training needs equally many images and labels, got {} and {}",
                images.len(),
                label_ids.len()
            )));
        }
        if let Some(&bad) = label_ids.iter().find(|&&id| id >= self.config.n_classes) {
            return Err(Error::Param(format!(
                "label id {bad} out of range for {} classes",
                self.config.n_classes
            )));
        }
        let inputs: Vec<Array3<f64>> =
            images.iter().map(|img| self.check_input(img)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let mut opt = SgdMomentum::new(self.config.learning_rate, MOMENTUM);
        let mut epoch_losses = Vec::with_capacity(self.config.epochs);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let mut grads = GradStore::new();
                for &idx in chunk {
                    let (logits, cache) = self.forward(&inputs[idx]);
                    let probs = Self::softmax_row(&logits);
                    epoch_loss -= probs[label_ids[idx]].max(1e-300).ln();
                    let mut d_logits = Array2::zeros((1, self.config.n_classes));
                    for (j, &p) in probs.iter().enumerate() {
                        d_logits[(0, j)] = (p - f64::from(u8::from(j == label_ids[idx])))
                            / chunk.len() as f64;
                    }
                    self.backward(&cache, &d_logits, &mut grads);
                }
                opt.step(&grads, |cb| self.visit_params_mut(cb));
            }
            epoch_losses.push(epoch_loss / inputs.len() as f64);
        }
        self.trained = true;
        Ok(epoch_losses)
    }

    /// Fraction of images whose argmax class matches the given label id.
    pub fn accuracy(&self, images: &[ImageGrid], label_ids: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Param("accuracy needs at least one image".into()));
        }
        let mut correct = 0usize;
        for (image, &want) in images.iter().zip(label_ids) {
            if self.predict(image)? == want {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &ndarray::ArrayD<f64>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.fc.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.conv1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.fc.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        self.visit_params(&mut |name, arr| arrays.push((name.to_string(), arr.clone())));
        let meta = serde_json::json!({
            "kind": "classifier",
            "config": self.config,
            "labels": self.labels,
            "trained": self.trained,
        });
        checkpoint::save_container(path, &meta, &arrays)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (meta, mut arrays) = checkpoint::load_container(path)?;
        if meta["kind"] != "classifier" {
            return Err(Error::Format(format!(
                "container holds kind {}, expected 'classifier'",
                meta["kind"]
            )));
        }
        let config: ClassifierConfig = serde_json::from_value(meta["config"].clone())?;
        let labels: Vec<String> = serde_json::from_value(meta["labels"].clone())?;
        let trained = meta["trained"].as_bool().unwrap_or(false);
        let mut clf = Self::new(config, labels)?;
        clf.trained = trained;
        let mut missing = Vec::new();
        clf.visit_params_mut(&mut |name, param| match arrays.remove(name) {
            Some(arr) if arr.shape() == param.shape() => *param = arr,
            Some(arr) => missing.push(format!("{name} has shape {:?}, expected {:?}", arr.shape(), param.shape())),
            None => missing.push(format!("{name} absent")),
        });
        for name in arrays.keys() {
            missing.push(format!("{name} unexpected"));
        }
        if !missing.is_empty() {
            return Err(Error::Format(format!("classifier arrays: {}", missing.join("; "))));
        }
        Ok(clf)
    }
}

impl FeatureExtractor for SmallClassifier {
    fn id(&self) -> &str {
        "cnn16-32-fc64"
    }

    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn features(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        let x = self.check_input(image)?;
        let (_, cache) = self.forward(&x);
        Ok(cache.feat.row(0).to_vec())
    }
}

/// Images plus label ids (indexes into the manifest's sorted label list).
pub fn manifest_images(manifest: &DatasetManifest) -> Result<(Vec<ImageGrid>, Vec<usize>, Vec<String>)> {
    let mut labels = manifest.labels.clone();
    labels.sort();
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut ids = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        images.push(ImageGrid::load_png(&manifest.resolve(entry))?);
        let id = labels
            .iter()
            .position(|l| l == &entry.label)
            .ok_or_else(|| Error::Config(format!("label '{}' missing from label set", entry.label)))?;
        ids.push(id);
    }
    Ok((images, ids, labels))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassifyOutcome {
    pub combo: String,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
}

fn sorted_labels(m: &DatasetManifest) -> Vec<String> {
    let mut l = m.labels.clone();
    l.sort();
    l.dedup();
    l
}

/// Train one classifier per provenance combination and report test
/// accuracy for each. Combinations with no training images are skipped.
pub fn classify_eval(
    train: &DatasetManifest,
    test: &DatasetManifest,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<ClassifyOutcome>> {
    let labels = sorted_labels(train);
    if labels != sorted_labels(test) {
        return Err(Error::Config(format!(
            "label sets differ: train {:?} vs test {:?}",
            labels,
            sorted_labels(test)
        )));
    }
    let train_paths: BTreeSet<_> = train.entries.iter().map(|e| train.resolve(e)).collect();
    let overlap: Vec<String> = test
        .entries
        .iter()
        .filter(|e| train_paths.contains(&test.resolve(e)))
        .map(|e| e.path.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Validation(format!(
            "train and test manifests share {} images (first: {})",
            overlap.len(),
            overlap[0]
        )));
    }

    let (test_images, test_ids, _) = manifest_images(test)?;
    let input_side = test_images[0].pixels.dim().0;

    let real: BTreeSet<Source> = [Source::Real, Source::Simulated].into();
    let synthetic: BTreeSet<Source> = [Source::Generated, Source::StyleInjected].into();
    let both: BTreeSet<Source> = real.union(&synthetic).copied().collect();
    let combos = [("real", real), ("synthetic", synthetic), ("real+synthetic", both)];

    let mut outcomes = Vec::new();
    for (i, (name, sources)) in combos.into_iter().enumerate() {
        let subset = DatasetManifest {
            version: train.version,
            labels: train.labels.clone(),
            entries: train
                .entries
                .iter()
                .filter(|e| sources.contains(&e.source))
                .cloned()
                .collect(),
            base_dir: train.base_dir.clone(),
        };
        if subset.entries.is_empty() {
            continue;
        }
        let (images, ids, _) = manifest_images(&subset)?;
        let combo_cfg = ClassifierConfig {
            n_classes: labels.len(),
            input_side,
            seed: seed.wrapping_add(i as u64),
            ..*cfg
        };
        let mut clf = SmallClassifier::new(combo_cfg, labels.clone())?;
        clf.train(&images, &ids)?;
        outcomes.push(ClassifyOutcome {
            combo: name.to_string(),
            n_train: images.len(),
            n_test: test_images.len(),
            accuracy: clf.accuracy(&test_images, &test_ids)?,
        });
    }
    if outcomes.is_empty() {
        return Err(Error::Config("no provenance combination has training images".into()));
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_sonar, split};
    use crate::metrics::extract_features;
    use std::collections::BTreeMap;

    fn mix(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(l, f)| (l.to_string(), *f)).collect()
    }

    fn tiny_config(n_classes: usize, epochs: usize) -> ClassifierConfig {
        ClassifierConfig { n_classes, input_side: 32, epochs, batch_size: 8, ..Default::default() }
    }

    #[test]
    fn untrained_extractor_is_rejected_and_training_enables_it() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_toy_sonar(6, 1, &mix(&[("ship", 0.5), ("seafloor", 0.5)]), 32, dir.path()).unwrap();
        let (images, ids, labels) = manifest_images(&manifest).unwrap();

        let mut clf = SmallClassifier::new(tiny_config(2, 1), labels).unwrap();
        assert!(matches!(extract_features(&images, &clf), Err(Error::Config(_))));

        clf.train(&images, &ids).unwrap();
        let feats = extract_features(&images, &clf).unwrap();
        assert!(feats.iter().all(|f| f.len() == FEATURE_DIM));
        let again = clf.features(&images[0]).unwrap();
        assert_eq!(feats[0], again);
    }

    #[test]
    fn nearest_neighbor_in_feature_space_is_the_image_itself() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_toy_sonar(6, 2, &mix(&[("mine", 0.5), ("seafloor", 0.5)]), 32, dir.path()).unwrap();
        let (images, ids, labels) = manifest_images(&manifest).unwrap();
        let mut clf = SmallClassifier::new(tiny_config(2, 2), labels).unwrap();
        clf.train(&images, &ids).unwrap();
        let feats = extract_features(&images, &clf).unwrap();
        for (i, fi) in feats.iter().enumerate() {
            let (best, dist) = feats
                .iter()
                .enumerate()
                .map(|(j, fj)| {
                    let d: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                    (j, d)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(best, i);
            assert_eq!(dist, 0.0);
        }
    }

    #[test]
    fn separable_toy_classes_reach_high_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_toy_sonar(60, 3, &mix(&[("ship", 0.5), ("seafloor", 0.5)]), 32, dir.path()).unwrap();
        let (train_m, _, test_m) = split(&manifest, (0.7, 0.15, 0.15), 5).unwrap();
        let (train_images, train_ids, labels) = manifest_images(&train_m).unwrap();
        let (test_images, test_ids, _) = manifest_images(&test_m).unwrap();
        let mut clf = SmallClassifier::new(tiny_config(2, 15), labels).unwrap();
        let losses = clf.train(&train_images, &train_ids).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap(), "loss should fall");
        let acc = clf.accuracy(&test_images, &test_ids).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_toy_sonar(4, 4, &mix(&[("plane", 0.5), ("seafloor", 0.5)]), 32, dir.path()).unwrap();
        let (images, ids, labels) = manifest_images(&manifest).unwrap();
        let mut clf = SmallClassifier::new(tiny_config(2, 1), labels).unwrap();
        clf.train(&images, &ids).unwrap();
        let path = dir.path().join("clf.ckpt");
        clf.save_checkpoint(&path).unwrap();
        let back = SmallClassifier::load_checkpoint(&path).unwrap();
        assert!(back.is_trained());
        assert_eq!(back.labels, clf.labels);
        let mut orig = Vec::new();
        clf.visit_params(&mut |n, a| orig.push((n.to_string(), a.clone())));
        back.visit_params(&mut |n, a| {
            let (en, ea) = &orig.remove(0);
            assert_eq!(n, en);
            for (x, y) in a.iter().zip(ea.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        });
        assert_eq!(back.predict(&images[0]).unwrap(), clf.predict(&images[0]).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut clf = SmallClassifier::new(
            ClassifierConfig { n_classes: 2, input_side: 8, epochs: 1, ..Default::default() },
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array3::from_shape_fn((1, 8, 8), |_| rand::Rng::gen::<f64>(&mut rng));
        let loss = |clf: &SmallClassifier| {
            let (logits, _) = clf.forward(&x);
            -SmallClassifier::softmax_row(&logits)[0].ln()
        };
        let (logits, cache) = clf.forward(&x);
        let probs = SmallClassifier::softmax_row(&logits);
        let mut d_logits = Array2::zeros((1, 2));
        d_logits[(0, 0)] = probs[0] - 1.0;
        d_logits[(0, 1)] = probs[1];
        let mut grads = GradStore::new();
        clf.backward(&cache, &d_logits, &mut grads);

        let h = 1e-6;
        for name in ["clf.conv1.w", "clf.conv2.b", "clf.fc.w", "clf.head.w"] {
            let analytic = *grads.get(name).unwrap().iter().next().unwrap();
            let bump = |clf: &mut SmallClassifier, delta: f64| {
                clf.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.as_slice_mut().unwrap()[0] += delta;
                    }
                });
            };
            bump(&mut clf, h);
            let up = loss(&clf);
            bump(&mut clf, -2.0 * h);
            let down = loss(&clf);
            bump(&mut clf, h);
            let numeric = (up - down) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-6, "{name}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn classify_eval_guards_and_reports_per_combo() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_toy_sonar(40, 6, &mix(&[("ship", 0.5), ("seafloor", 0.5)]), 32, dir.path()).unwrap();
        let (mut train_m, _, test_m) = split(&manifest, (0.7, 0.15, 0.15), 1).unwrap();

        // Degenerate guard: evaluating on the training set itself.
        assert!(matches!(
            classify_eval(&train_m, &train_m, &tiny_config(2, 1), 0),
            Err(Error::Validation(_))
        ));

        // Label mismatch guard.
        let mut narrowed = test_m.clone();
        narrowed.labels = vec!["ship".into()];
        narrowed.entries.retain(|e| e.label == "ship");
        assert!(matches!(
            classify_eval(&train_m, &narrowed, &tiny_config(2, 1), 0),
            Err(Error::Config(_))
        ));

        // Mark half the training entries as generated so two combos exist.
        for entry in train_m.entries.iter_mut().step_by(2) {
            entry.source = Source::Generated;
        }
        let outcomes = classify_eval(&train_m, &test_m, &tiny_config(2, 4), 0).unwrap();
        let names: Vec<&str> = outcomes.iter().map(|o| o.combo.as_str()).collect();
        assert_eq!(names, vec!["real", "synthetic", "real+synthetic"]);
        let both = &outcomes[2];
        assert_eq!(both.n_train, train_m.entries.len());
        assert!(outcomes.iter().all(|o| (0.0..=1.0).contains(&o.accuracy)));

        let rerun = classify_eval(&train_m, &test_m, &tiny_config(2, 4), 0).unwrap();
        for (a, b) in outcomes.iter().zip(&rerun) {
            assert_eq!(a.accuracy, b.accuracy);
        }
    }
}
