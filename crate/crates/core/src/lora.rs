//! Low-rank adapters (LoRA) for attention projections.
//!
//! An adapter holds `A: m×r` and `B: r×n`; the adapted projection computes
//! `base(x) + α·((x·A)·B)`, so the effective weight is `W + α·A·B`. `A` is
//! Gaussian-initialized (σ=0.01) and `B` starts at zero, making a fresh
//! adapter an exact no-op. Only Q/K/V projections are adaptable.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TrainingSet;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{as2, gaussian, GradStore, SgdMomentum};
use crate::sampler::{draw_batch, TrainConfig};
use crate::schedule::NoiseSchedule;

/// Which projection of an attention layer an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Q,
    K,
    V,
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjKind::Q => write!(f, "q"),
            ProjKind::K => write!(f, "k"),
            ProjKind::V => write!(f, "v"),
        }
    }
}

/// A single low-rank adapter attached to one projection of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub rank: usize,
    pub alpha: f64,
    /// (layer_id, projection) this adapter targets.
    pub target: (String, ProjKind),
}

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_ALPHA: f64 = 1.0;

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 0.01²)`, `B = 0`, so `ΔW = 0`.
    pub fn init(
        m: usize,
        n: usize,
        rank: usize,
        alpha: f64,
        target: (String, ProjKind),
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Param(format!(
                "adapter rank {rank} must be in 1..=min({m}, {n})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(&[m, rank], 0.01, &mut rng)
            .into_dimensionality()
            .unwrap();
        Ok(Self { a, b: Array2::zeros((rank, n)), rank, alpha, target })
    }

    /// `ΔW = A·B`, shape m×n.
    pub fn delta_weight(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }

    /// The adapter's additive contribution `α·((x·A)·B)` for input rows x.
    pub fn delta_out(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.a).dot(&self.b) * self.alpha
    }

    /// Backward through [`LoraAdapter::delta_out`]: accumulates dA/dB under
    /// this adapter's parameter names and returns the extra dx term.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut GradStore) -> Array2<f64> {
        let dyb = dy.dot(&self.b.t()) * self.alpha; // d(x·A)
        grads.add(&self.param_name("a"), x.t().dot(&dyb).into_dyn());
        grads.add(
            &self.param_name("b"),
            (x.dot(&self.a).t().dot(dy) * self.alpha).into_dyn(),
        );
        dyb.dot(&self.a.t())
    }

    pub fn param_name(&self, which: &str) -> String {
        format!("lora.{}.{}.{}", self.target.0, self.target.1, which)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        // Adapters store typed matrices; expose them through temporary
        // dynamic-dim buffers so the optimizer sees the uniform interface.
        let name_a = self.param_name("a");
        let mut a = self.a.clone().into_dyn();
        f(&name_a, &mut a);
        self.a = a.into_dimensionality().unwrap();
        let name_b = self.param_name("b");
        let mut b = self.b.clone().into_dyn();
        f(&name_b, &mut b);
        self.b = b.into_dimensionality().unwrap();
    }
}

/// The adapters attached to a denoiser, keyed by (layer_id, projection).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    adapters: BTreeMap<(String, ProjKind), LoraAdapter>,
}

impl AdapterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, adapter: LoraAdapter) -> Result<()> {
        let key = adapter.target.clone();
        if self.adapters.contains_key(&key) {
            return Err(Error::Config(format!(
                "duplicate adapter for layer '{}' projection {}",
                key.0, key.1
            )));
        }
        self.adapters.insert(key, adapter);
        Ok(())
    }

    pub fn get(&self, layer_id: &str, proj: ProjKind) -> Option<&LoraAdapter> {
        self.adapters.get(&(layer_id.to_string(), proj))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.values_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Stable tag identifying this adapter set's targets, used by the merge
    /// guard in checkpoints.
    pub fn target_tags(&self) -> Vec<String> {
        self.adapters.keys().map(|(l, p)| format!("{l}.{p}")).collect()
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        for ad in self.adapters.values_mut() {
            ad.visit_params_mut(f);
        }
    }

    /// Serialize to the named-array container. The base checkpoint hash ties
    /// an adapter file to the weights it was trained against.
    pub fn save(&self, path: &Path, base_checkpoint_hash: &str) -> Result<()> {
        let mut arrays = Vec::new();
        let mut meta = Vec::new();
        for ad in self.adapters.values() {
            arrays.push((ad.param_name("a"), ad.a.clone().into_dyn()));
            arrays.push((ad.param_name("b"), ad.b.clone().into_dyn()));
            meta.push(serde_json::json!({
                "layer_id": ad.target.0,
                "projection": ad.target.1,
                "rank": ad.rank,
                "alpha": ad.alpha,
            }));
        }
        let config = serde_json::json!({
            "kind": "lora_adapter_set",
            "base_checkpoint_hash": base_checkpoint_hash,
            "adapters": meta,
        });
        crate::checkpoint::save_container(path, &config, &arrays)
    }

    /// Load an adapter set; returns the set and the recorded base hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (config, mut arrays) = crate::checkpoint::load_container(path)?;
        if config.get("kind").and_then(|v| v.as_str()) != Some("lora_adapter_set") {
            return Err(Error::Format("not an adapter file".into()));
        }
        let base_hash = config
            .get("base_checkpoint_hash")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("adapter file missing base_checkpoint_hash".into()))?
            .to_string();
        let metas = config
            .get("adapters")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Format("adapter file missing adapter list".into()))?;
        let mut set = AdapterSet::new();
        for m in metas {
            let layer_id = m["layer_id"].as_str().unwrap_or_default().to_string();
            let proj: ProjKind = serde_json::from_value(m["projection"].clone())
                .map_err(|e| Error::Format(format!("bad projection: {e}")))?;
            let rank = m["rank"].as_u64().unwrap_or(0) as usize;
            let alpha = m["alpha"].as_f64().unwrap_or(DEFAULT_ALPHA);
            let target = (layer_id, proj);
            let name = format!("lora.{}.{}", target.0, target.1);
            let a = arrays
                .remove(&format!("{name}.a"))
                .ok_or_else(|| Error::Format(format!("adapter file missing {name}.a")))?;
            let b = arrays
                .remove(&format!("{name}.b"))
                .ok_or_else(|| Error::Format(format!("adapter file missing {name}.b")))?;
            set.insert(LoraAdapter {
                a: a.into_dimensionality().map_err(|e| Error::Format(e.to_string()))?,
                b: b.into_dimensionality().map_err(|e| Error::Format(e.to_string()))?,
                rank,
                alpha,
                target,
            })?;
        }
        Ok((set, base_hash))
    }
}

/// Adapted projection on a standalone weight matrix: `x·W + α·(x·A)·B`.
///
/// This is the linear probe used by tests; inside the denoiser the same
/// arithmetic runs in the attention layer's projection path.
pub fn adapted_projection(w: &ndarray::ArrayD<f64>, adapter: &LoraAdapter, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&as2(w)) + adapter.delta_out(x)
}

/// Outcome of an adapter-only optimization run.
#[derive(Debug)]
pub struct LoraTrainReport {
    pub losses: Vec<f64>,
    /// Hash of the frozen base parameters, recorded so adapter files can
    /// be tied to the exact weights they were trained against.
    pub base_hash: String,
}

/// Optimize only the attached adapters' A/B matrices against the noise
/// prediction objective. Base weights and the text encoder stay frozen;
/// the run asserts their hash is unchanged afterwards.
pub fn train_lora(
    set: &TrainingSet,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LoraTrainReport> {
    cfg.validate()?;
    if set.latents.is_empty() {
        return Err(Error::Param("training set must be non-empty".into()));
    }
    if denoiser.adapters.is_empty() {
        return Err(Error::Config("no trainable adapters attached".into()));
    }
    let base_hash = denoiser.params_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(cfg.learning_rate, 0.9);
    let n_elem = (set.latent_shape.0 * set.latent_shape.1 * set.latent_shape.2) as f64;
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for _ in 0..cfg.total_steps {
        let batch = draw_batch(set, cfg.batch_size, schedule.t_max(), &mut rng);
        let mut grads = GradStore::new();
        let mut loss_sum = 0.0;
        for sample in &batch {
            let z0 = &set.latents[sample.index];
            let z_t =
                crate::schedule::noise_with_alpha_bar(z0, schedule.alpha_bar(sample.t), &sample.eps);
            let enc = denoiser.encode_prompt(&sample.prompt)?;
            let (eps_hat, cache) = denoiser.forward_train(&z_t, sample.t, &enc.embedding)?;
            let residual = &eps_hat - &sample.eps;
            loss_sum += residual.mapv(|v| v * v).sum();
            let d_eps = &residual * (2.0 / (n_elem * cfg.batch_size as f64));
            // The conditioning gradient is dropped: the text encoder is
            // part of the frozen base here.
            let _ = denoiser.backward(&cache, &d_eps, &mut grads);
        }
        opt.step(&grads, |cb| denoiser.adapters.visit_params_mut(cb));
        losses.push(loss_sum / cfg.batch_size as f64);
    }
    assert_eq!(
        base_hash,
        denoiser.params_hash(),
        "frozen base changed during adapter training"
    );
    Ok(LoraTrainReport { losses, base_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn target() -> (String, ProjKind) {
        ("enc1.self".to_string(), ProjKind::Q)
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let ad = LoraAdapter::init(4, 6, 2, 1.0, target(), 9).unwrap();
        assert!(ad.delta_weight().iter().all(|&v| v == 0.0));
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0]]);
        assert!(ad.delta_out(&x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic_and_full_rank_boundary_works() {
        let a1 = LoraAdapter::init(4, 6, 2, 1.0, target(), 42).unwrap();
        let a2 = LoraAdapter::init(4, 6, 2, 1.0, target(), 42).unwrap();
        assert_eq!(a1.a, a2.a);
        assert!(LoraAdapter::init(4, 6, 4, 1.0, target(), 1).is_ok());
        assert!(matches!(
            LoraAdapter::init(4, 6, 5, 1.0, target(), 1),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            LoraAdapter::init(4, 6, 0, 1.0, target(), 1),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn delta_weight_hand_example() {
        let mut ad = LoraAdapter::init(2, 2, 1, 1.0, target(), 0).unwrap();
        ad.a = arr2(&[[1.0], [0.0]]);
        ad.b = arr2(&[[0.0, 2.0]]);
        let dw = ad.delta_weight();
        assert_eq!(dw, arr2(&[[0.0, 2.0], [0.0, 0.0]]));
    }

    #[test]
    fn rank_of_delta_is_bounded_by_r() {
        let mut ad = LoraAdapter::init(5, 5, 2, 1.0, target(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ad.b = gaussian(&[2, 5], 1.0, &mut rng).into_dimensionality().unwrap();
        let dw = ad.delta_weight();
        // Rank <= 2 means any 3x3 minor is singular; check via SVD instead.
        let svd = nalgebra::DMatrix::from_row_slice(5, 5, dw.as_slice().unwrap())
            .svd(false, false);
        let significant = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
        assert!(significant <= 2);
    }

    #[test]
    fn adapted_projection_hand_example() {
        let w = arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        let mut ad = LoraAdapter::init(2, 2, 1, 0.5, target(), 0).unwrap();
        ad.a = arr2(&[[1.0], [0.0]]);
        ad.b = arr2(&[[0.0, 2.0]]);
        let x = arr2(&[[1.0, 0.0]]);
        let y = adapted_projection(&w, &ad, &x);
        assert_eq!(y, arr2(&[[1.0, 1.0]]));
    }

    #[test]
    fn alpha_zero_is_bitwise_no_op() {
        let mut ad = LoraAdapter::init(3, 3, 2, 0.0, target(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        ad.b = gaussian(&[2, 3], 1.0, &mut rng).into_dimensionality().unwrap();
        let w = gaussian(&[3, 3], 1.0, &mut rng);
        let x = arr2(&[[0.1, -0.7, 2.0]]);
        let base = x.dot(&as2(&w));
        let adapted = adapted_projection(&w, &ad, &x);
        assert_eq!(base, adapted);
    }

    #[test]
    fn output_difference_is_linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = gaussian(&[3, 4], 1.0, &mut rng);
        let x = arr2(&[[0.3, 1.0, -0.5]]);
        let mut ad = LoraAdapter::init(3, 4, 2, 1.0, target(), 12).unwrap();
        ad.b = gaussian(&[2, 4], 1.0, &mut rng).into_dimensionality().unwrap();
        let base = x.dot(&as2(&w));
        let diff_at = |alpha: f64| {
            let mut a2 = ad.clone();
            a2.alpha = alpha;
            adapted_projection(&w, &a2, &x) - &base
        };
        let d1 = diff_at(1.0);
        for alpha in [0.25, 0.5, 2.0] {
            let da = diff_at(alpha);
            for (lhs, rhs) in da.iter().zip(d1.iter()) {
                assert!((lhs - alpha * rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ad = LoraAdapter::init(3, 2, 2, 0.7, target(), 14).unwrap();
        ad.b = gaussian(&[2, 2], 0.5, &mut rng).into_dimensionality().unwrap();
        let x = gaussian(&[4, 3], 1.0, &mut rng).into_dimensionality().unwrap();
        let lw: Array2<f64> = gaussian(&[4, 2], 1.0, &mut rng).into_dimensionality().unwrap();
        let loss = |ad: &LoraAdapter| (&ad.delta_out(&x) * &lw).sum();

        let mut grads = GradStore::new();
        let dx = ad.backward(&x, &lw, &mut grads);
        let h = 1e-6;
        let ga = grads.get(&ad.param_name("a")).unwrap().to_owned();
        for idx in 0..6 {
            let mut plus = ad.clone();
            plus.a.as_slice_mut().unwrap()[idx] += h;
            let mut minus = ad.clone();
            minus.a.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((ga.as_slice().unwrap()[idx] - num).abs() < 1e-6);
        }
        let gb = grads.get(&ad.param_name("b")).unwrap().to_owned();
        for idx in 0..4 {
            let mut plus = ad.clone();
            plus.b.as_slice_mut().unwrap()[idx] += h;
            let mut minus = ad.clone();
            minus.b.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((gb.as_slice().unwrap()[idx] - num).abs() < 1e-6);
        }
        // dx: perturb one input element.
        let mut xp = x.clone();
        xp[(0, 0)] += h;
        let mut xm = x.clone();
        xm[(0, 0)] -= h;
        let num = ((&ad.delta_out(&xp) * &lw).sum() - (&ad.delta_out(&xm) * &lw).sum()) / (2.0 * h);
        assert!((dx[(0, 0)] - num).abs() < 1e-6);
    }

    #[test]
    fn adapter_set_round_trips_through_file() {
        let mut set = AdapterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut ad = LoraAdapter::init(4, 4, 2, 0.5, ("mid.self".into(), ProjKind::K), 21).unwrap();
        ad.b = gaussian(&[2, 4], 1.0, &mut rng).into_dimensionality().unwrap();
        set.insert(ad).unwrap();
        set.insert(LoraAdapter::init(4, 4, 1, 1.0, ("mid.self".into(), ProjKind::V), 22).unwrap())
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.bin");
        set.save(&path, "abc123").unwrap();
        let (back, hash) = AdapterSet::load(&path).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(back, set);
    }

    #[test]
    fn duplicate_target_rejected() {
        let mut set = AdapterSet::new();
        set.insert(LoraAdapter::init(4, 4, 2, 1.0, target(), 1).unwrap()).unwrap();
        assert!(set.insert(LoraAdapter::init(4, 4, 2, 1.0, target(), 2).unwrap()).is_err());
    }

    use crate::denoiser::DenoiserConfig;
    use crate::schedule::ScheduleSpec;
    use crate::text::Vocabulary;
    use ndarray::Array3;

    fn tiny_denoiser(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            latent_channels: 2,
            latent_side: 8,
            widths: [4, 6, 8],
            heads: 1,
            d_cond: 6,
            max_len: 8,
            time_dim: 8,
            seed,
        };
        let vocab = Vocabulary::build(["image of SH34* ship on sand"]);
        Denoiser::new(cfg, vocab, ScheduleSpec { t_max: 10, beta_start: 1e-4, beta_end: 0.02 })
            .unwrap()
    }

    fn tiny_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(10, 1e-4, 0.02).unwrap()
    }

    fn shifted_latents(n: usize, shift: f64, seed: u64) -> Vec<Array3<f64>> {
        (0..n)
            .map(|i| {
                let s = seed ^ (1 + i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                gaussian(&[8, 8, 2], 1.0, &mut rng)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    + shift
            })
            .collect()
    }

    fn training_set(latents: Vec<Array3<f64>>) -> TrainingSet {
        let n = latents.len();
        TrainingSet {
            latents,
            captions_low: vec![String::new(); n],
            captions_high: vec![None; n],
            latent_shape: (8, 8, 2),
            source_shape: (16, 16, 1),
            dynamic_range: 255.0,
        }
    }

    fn attach_fresh(
        d: &mut Denoiser,
        targets: &[(&str, ProjKind)],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) {
        let mut set = AdapterSet::new();
        for (i, (layer, proj)) in targets.iter().enumerate() {
            let (m, n) = d.projection_shape(layer, *proj).unwrap();
            let ad = LoraAdapter::init(m, n, rank, alpha, (layer.to_string(), *proj), seed + i as u64)
                .unwrap();
            set.insert(ad).unwrap();
        }
        d.attach_adapters(set).unwrap();
    }

    const ALL_TARGETS: [(&str, ProjKind); 12] = [
        ("enc1.self", ProjKind::Q),
        ("enc1.self", ProjKind::K),
        ("enc1.self", ProjKind::V),
        ("enc1.cross", ProjKind::Q),
        ("enc1.cross", ProjKind::K),
        ("enc1.cross", ProjKind::V),
        ("mid.self", ProjKind::Q),
        ("mid.self", ProjKind::K),
        ("mid.self", ProjKind::V),
        ("mid.cross", ProjKind::Q),
        ("mid.cross", ProjKind::K),
        ("mid.cross", ProjKind::V),
    ];

    fn train_all_params(
        set: &TrainingSet,
        d: &mut Denoiser,
        schedule: &NoiseSchedule,
        steps: usize,
        lr: f64,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = SgdMomentum::new(lr, 0.9);
        let n_elem = (set.latent_shape.0 * set.latent_shape.1 * set.latent_shape.2) as f64;
        let batch_size = 2;
        for _ in 0..steps {
            let batch = draw_batch(set, batch_size, schedule.t_max(), &mut rng);
            let mut grads = GradStore::new();
            for sample in &batch {
                let z0 = &set.latents[sample.index];
                let z_t = crate::schedule::noise_with_alpha_bar(
                    z0,
                    schedule.alpha_bar(sample.t),
                    &sample.eps,
                );
                let enc = d.encode_prompt(&sample.prompt).unwrap();
                let (eps_hat, cache) = d.forward_train(&z_t, sample.t, &enc.embedding).unwrap();
                let d_eps = (&eps_hat - &sample.eps) * (2.0 / (n_elem * batch_size as f64));
                let _ = d.backward(&cache, &d_eps, &mut grads);
            }
            opt.step(&grads, |cb| d.visit_params_mut(cb));
        }
    }

    fn eval_loss(
        latents: &[Array3<f64>],
        d: &mut Denoiser,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> f64 {
        let prompts = vec![String::new(); latents.len()];
        let mut total = 0.0;
        for rep in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + rep);
            total +=
                crate::sampler::training_loss(latents, &prompts, d, schedule, &mut rng).unwrap();
        }
        total / 4.0
    }

    #[test]
    fn training_without_adapters_is_a_config_error() {
        let set = training_set(shifted_latents(2, 0.0, 1));
        let mut d = tiny_denoiser(11);
        let schedule = tiny_schedule();
        let cfg = TrainConfig {
            total_steps: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            snapshot_every: 1,
            seed: 0,
        };
        assert!(matches!(train_lora(&set, &mut d, &schedule, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_step_run_changes_nothing() {
        let set = training_set(shifted_latents(2, 0.0, 2));
        let mut d = tiny_denoiser(12);
        let schedule = tiny_schedule();
        let z = &set.latents[0];
        let cond = d.encode_prompt("").unwrap().embedding;
        let y_base = d.predict_noise(z, 3, &cond).unwrap();

        attach_fresh(&mut d, &[("enc1.self", ProjKind::Q), ("mid.cross", ProjKind::V)], 2, 1.0, 50);
        let adapters_before = d.adapters.clone();
        let cfg = TrainConfig {
            total_steps: 0,
            batch_size: 1,
            learning_rate: 1e-3,
            snapshot_every: 1,
            seed: 0,
        };
        let report = train_lora(&set, &mut d, &schedule, &cfg).unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(d.adapters, adapters_before);
        let y_after = d.predict_noise(z, 3, &cond).unwrap();
        assert_eq!(y_base, y_after);
    }

    #[test]
    fn shifted_subset_fine_tune_lowers_loss_by_ten_percent() {
        let schedule = tiny_schedule();
        let base_set = training_set(shifted_latents(6, 0.0, 100));
        let mut d = tiny_denoiser(11);
        train_all_params(&base_set, &mut d, &schedule, 1600, 1e-2, 7);

        // The subset's latents sit three standard deviations off the base
        // distribution, so the frozen model mis-predicts systematically.
        let shifted = shifted_latents(6, 3.0, 200);
        let shifted_set = training_set(shifted.clone());
        let base_loss = eval_loss(&shifted, &mut d, &schedule, 900);
        let hash_before = d.params_hash();

        attach_fresh(&mut d, &ALL_TARGETS, DEFAULT_RANK, DEFAULT_ALPHA, 60);
        let cfg = TrainConfig {
            total_steps: 600,
            batch_size: 2,
            learning_rate: 3e-3,
            snapshot_every: 600,
            seed: 13,
        };
        let report = train_lora(&shifted_set, &mut d, &schedule, &cfg).unwrap();
        assert_eq!(report.base_hash, hash_before);
        assert_eq!(report.losses.len(), 600);

        // Same eval seed on both sides: identical timestep and noise draws
        // make the comparison paired, so the gap is purely the adapters.
        let adapted_loss = eval_loss(&shifted, &mut d, &schedule, 900);
        assert!(
            adapted_loss <= 0.9 * base_loss,
            "adapted loss {adapted_loss} is not >=10% below base loss {base_loss}"
        );
    }

    #[test]
    fn merged_model_matches_runtime_adapted_model() {
        let mut d = tiny_denoiser(21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A fresh head is all zeros, which would make both outputs
        // trivially equal; give it weight so the comparison has teeth.
        d.visit_params_mut(&mut |name, p| {
            if name == "head.w" {
                *p = gaussian(p.shape(), 0.3, &mut rng);
            }
        });

        let targets =
            [("enc1.self", ProjKind::Q), ("mid.cross", ProjKind::K), ("mid.cross", ProjKind::V)];
        let mut set = AdapterSet::new();
        for (i, (layer, proj)) in targets.iter().enumerate() {
            let (m, n) = d.projection_shape(layer, *proj).unwrap();
            let mut ad =
                LoraAdapter::init(m, n, 2, 0.7, (layer.to_string(), *proj), 70 + i as u64).unwrap();
            ad.b = gaussian(&[2, n], 0.5, &mut rng).into_dimensionality().unwrap();
            set.insert(ad).unwrap();
        }
        d.attach_adapters(set).unwrap();

        let mut zrng = ChaCha8Rng::seed_from_u64(6);
        let z = gaussian(&[8, 8, 2], 1.0, &mut zrng)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let cond = d.encode_prompt("image of SH34* ship").unwrap().embedding;
        let y_adapted = d.predict_noise(&z, 5, &cond).unwrap();

        assert_eq!(d.merge_adapters().unwrap(), 3);
        assert!(d.merged_lora);
        assert!(d.adapters.is_empty());
        let y_merged = d.predict_noise(&z, 5, &cond).unwrap();

        let max_diff = (&y_adapted - &y_merged).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-5, "merged and adapted outputs differ by {max_diff}");
        assert!(y_adapted.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn merging_zero_adapters_leaves_the_model_unchanged() {
        let mut d = tiny_denoiser(31);
        let h0 = d.params_hash();
        assert_eq!(d.merge_adapters().unwrap(), 0);
        assert_eq!(d.params_hash(), h0);
        assert!(!d.merged_lora);
    }

    #[test]
    fn second_merge_is_refused_and_flag_survives_checkpointing() {
        let mut d = tiny_denoiser(41);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, n) = d.projection_shape("mid.self", ProjKind::Q).unwrap();
        let mut ad = LoraAdapter::init(m, n, 2, 1.0, ("mid.self".into(), ProjKind::Q), 80).unwrap();
        ad.b = gaussian(&[2, n], 0.5, &mut rng).into_dimensionality().unwrap();
        let mut set = AdapterSet::new();
        set.insert(ad.clone()).unwrap();
        d.attach_adapters(set).unwrap();
        assert_eq!(d.merge_adapters().unwrap(), 1);

        let mut again = AdapterSet::new();
        again.insert(ad).unwrap();
        d.attach_adapters(again).unwrap();
        assert!(matches!(d.merge_adapters(), Err(Error::Config(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merged.ckpt");
        d.adapters = AdapterSet::new();
        d.save_checkpoint(&path).unwrap();
        let loaded = Denoiser::load_checkpoint(&path).unwrap();
        assert!(loaded.merged_lora);
    }

    #[test]
    fn attach_rejects_unknown_layers_and_bad_shapes() {
        let mut d = tiny_denoiser(51);
        let mut set = AdapterSet::new();
        set.insert(LoraAdapter::init(6, 6, 2, 1.0, ("nope.self".into(), ProjKind::Q), 90).unwrap())
            .unwrap();
        assert!(matches!(d.attach_adapters(set), Err(Error::Config(_))));

        let (m, n) = d.projection_shape("mid.cross", ProjKind::K).unwrap();
        assert_ne!(m, n);
        let mut swapped = AdapterSet::new();
        swapped
            .insert(LoraAdapter::init(n, m, 2, 1.0, ("mid.cross".into(), ProjKind::K), 91).unwrap())
            .unwrap();
        assert!(matches!(d.attach_adapters(swapped), Err(Error::Config(_))));
    }
}
