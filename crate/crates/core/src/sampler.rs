//! DDPM training objective, deterministic DDIM sampling and inversion, and
//! the training loop with snapshot cadence.
//!
//! All sampling here is deterministic (η = 0). One update moves a latent
//! between arbitrary schedule positions through the predicted clean latent:
//! `ẑ0 = (z − √(1−ᾱ_from)·ε̂)/√ᾱ_from`, then
//! `z' = √ᾱ_to·ẑ0 + √(1−ᾱ_to)·ε̂`. Sampling walks the step indices
//! downward and finishes at t = 0 (where ᾱ₀ = 1); inversion walks upward
//! re-using the current latent's prediction at the destination timestep,
//! the standard first-order approximation. Both directions evaluate the
//! denoiser at exactly the configured step indices, so captured traces
//! cover the timesteps an injection run will request.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Codec, LatentGrid};
use crate::data::TrainingSet;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::attention::{AttentionMode, AttentionTrace, RunTag};
use crate::nn::{GradStore, SgdMomentum};
use crate::schedule::NoiseSchedule;

pub const DEFAULT_NUM_STEPS: usize = 50;

/// DDIM step plan. `step_indices` may be given explicitly; when empty it
/// is derived uniformly from `num_steps` at resolution time.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_indices: Vec<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: DEFAULT_NUM_STEPS, step_indices: Vec::new() }
    }
}

impl SamplerConfig {
    pub fn uniform(num_steps: usize) -> Self {
        Self { num_steps, step_indices: Vec::new() }
    }

    /// The strictly increasing timesteps this run will visit, ending at T.
    pub fn resolve(&self, t_max: usize) -> Result<Vec<usize>> {
        let indices = if self.step_indices.is_empty() {
            if self.num_steps == 0 || self.num_steps > t_max {
                return Err(Error::Param(format!(
                    "num_steps must lie in 1..={t_max}, got {}",
                    self.num_steps
                )));
            }
            (0..self.num_steps).map(|i| ((i + 1) * t_max) / self.num_steps).collect()
        } else {
            self.step_indices.clone()
        };
        if indices.is_empty() {
            return Err(Error::Param("step_indices must be non-empty".into()));
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Param(format!(
                    "step_indices must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if indices[0] == 0 || *indices.last().unwrap() != t_max {
            return Err(Error::Param(format!(
                "step_indices must lie in 1..={t_max} and end at {t_max}, got {indices:?}"
            )));
        }
        Ok(indices)
    }
}

/// One deterministic DDIM update on raw ᾱ values.
fn ddim_step_alpha(
    z_t: &Array3<f64>,
    alpha_bar_from: f64,
    alpha_bar_to: f64,
    eps_hat: &Array3<f64>,
) -> Array3<f64> {
    let sa_from = alpha_bar_from.sqrt();
    let sq_from = (1.0 - alpha_bar_from).sqrt();
    let z0_hat = (z_t - &(eps_hat * sq_from)) / sa_from;
    let sa_to = alpha_bar_to.sqrt();
    let sq_to = (1.0 - alpha_bar_to).sqrt();
    z0_hat * sa_to + eps_hat * sq_to
}

/// Move a latent from schedule position `t_from` to `t_to` (either
/// direction) sharing one noise prediction.
pub fn ddim_step(
    z_t: &Array3<f64>,
    t_from: usize,
    t_to: usize,
    eps_hat: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    if t_from > schedule.t_max() || t_to > schedule.t_max() {
        return Err(Error::Param(format!(
            "step indices ({t_from} -> {t_to}) outside 0..={}",
            schedule.t_max()
        )));
    }
    if z_t.dim() != eps_hat.dim() {
        return Err(Error::Shape(format!(
            "latent {:?} and prediction {:?} shapes differ",
            z_t.dim(),
            eps_hat.dim()
        )));
    }
    Ok(ddim_step_alpha(z_t, schedule.alpha_bar(t_from), schedule.alpha_bar(t_to), eps_hat))
}

/// Reverse DDIM from noise to a clean latent. Honors the denoiser's active
/// attention mode; deterministic given parameters, input, and config.
pub fn ddim_sample(
    z_t_max: Array3<f64>,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    prompt: &str,
) -> Result<Array3<f64>> {
    let cond = denoiser.encode_prompt(prompt)?.embedding;
    ddim_sample_with_cond(z_t_max, denoiser, schedule, cfg, &cond)
}

pub fn ddim_sample_with_cond(
    z_t_max: Array3<f64>,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: &Array2<f64>,
) -> Result<Array3<f64>> {
    let indices = cfg.resolve(schedule.t_max())?;
    let mut z = z_t_max;
    for i in (0..indices.len()).rev() {
        let t_from = indices[i];
        let t_to = if i == 0 { 0 } else { indices[i - 1] };
        let eps_hat = denoiser.predict_noise(&z, t_from, cond)?;
        z = ddim_step(&z, t_from, t_to, &eps_hat, schedule)?;
    }
    Ok(z)
}

/// Forward DDIM from a clean latent to the schedule's endpoint. With
/// `capture` set, a fresh all-layer capture trace is installed for the run
/// and returned; otherwise the returned trace is empty and the denoiser's
/// current mode stays in effect.
pub fn ddim_invert(
    z0: &Array3<f64>,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    prompt: &str,
    capture: bool,
) -> Result<(Array3<f64>, AttentionTrace)> {
    let indices = cfg.resolve(schedule.t_max())?;
    let cond = denoiser.encode_prompt(prompt)?.embedding;

    let previous = if capture {
        Some(denoiser.set_attention_mode(AttentionMode::capture_all(RunTag::Content))?)
    } else {
        None
    };
    let run = (|| -> Result<Array3<f64>> {
        let mut z = z0.clone();
        let mut t_from = 0usize;
        for &t_to in &indices {
            let eps_hat = denoiser.predict_noise(&z, t_to, &cond)?;
            z = ddim_step(&z, t_from, t_to, &eps_hat, schedule)?;
            t_from = t_to;
        }
        Ok(z)
    })();

    let trace = match previous {
        Some(prev) => match denoiser.set_attention_mode(prev)? {
            AttentionMode::Capture { trace, .. } => trace,
            _ => return Err(Error::Config("capture mode was replaced mid-run".into())),
        },
        None => AttentionTrace::new(RunTag::Content),
    };
    Ok((run?, trace))
}

/// Per-sample randomness for one optimization step, drawn in a fixed
/// order so runs are bit-reproducible.
pub struct DrawnSample {
    pub index: usize,
    pub t: usize,
    pub eps: Array3<f64>,
    pub prompt: String,
}

/// Draw a batch: per sample, in order, the dataset index, the timestep,
/// the noise field, and (only when a high-level caption exists) one coin
/// for the low/high caption choice.
pub fn draw_batch(
    set: &TrainingSet,
    batch_size: usize,
    t_max: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DrawnSample> {
    let shape = set.latent_shape;
    (0..batch_size)
        .map(|_| {
            let index = rng.gen_range(0..set.latents.len());
            let t = rng.gen_range(1..=t_max);
            let eps = crate::nn::gaussian(&[shape.0, shape.1, shape.2], 1.0, rng)
                .into_dimensionality::<ndarray::Ix3>()
                .expect("latent noise is 3d");
            let prompt = match &set.captions_high[index] {
                Some(high) if rng.gen::<bool>() => high.clone(),
                _ => set.captions_low[index].clone(),
            };
            DrawnSample { index, t, eps, prompt }
        })
        .collect()
}

/// Mean over the batch of the per-sample sum-of-squares noise-prediction
/// error, with `t` uniform on 1..=T and ε standard normal. The predictor
/// is a closure so tests can substitute oracles for the denoiser.
pub fn training_loss_with(
    z0_batch: &[Array3<f64>],
    prompts: &[String],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    predict: &mut dyn FnMut(&Array3<f64>, usize, &str) -> Result<Array3<f64>>,
) -> Result<f64> {
    if z0_batch.is_empty() {
        return Err(Error::Param("training batch must be non-empty".into()));
    }
    if z0_batch.len() != prompts.len() {
        return Err(Error::Param(format!(
            "batch has {} latents but {} prompts",
            z0_batch.len(),
            prompts.len()
        )));
    }
    let mut total = 0.0;
    for (z0, prompt) in z0_batch.iter().zip(prompts) {
        let t = rng.gen_range(1..=schedule.t_max());
        let dim = z0.dim();
        let eps = crate::nn::gaussian(&[dim.0, dim.1, dim.2], 1.0, rng)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("latent noise is 3d");
        let z_t = crate::schedule::noise_with_alpha_bar(z0, schedule.alpha_bar(t), &eps);
        let eps_hat = predict(&z_t, t, prompt)?;
        total += (&eps - &eps_hat).mapv(|v| v * v).sum();
    }
    Ok(total / z0_batch.len() as f64)
}

pub fn training_loss(
    z0_batch: &[Array3<f64>],
    prompts: &[String],
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    training_loss_with(z0_batch, prompts, schedule, rng, &mut |z_t, t, prompt| {
        let cond = denoiser.encode_prompt(prompt)?.embedding;
        denoiser.predict_noise(z_t, t, &cond)
    })
}

/// Optimization run parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            snapshot_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Param("snapshot_every must be >= 1".into()));
        }
        if self.total_steps > 0 && self.snapshot_every > self.total_steps {
            return Err(Error::Param(format!(
                "snapshot_every ({}) must divide into total_steps ({}) at least once",
                self.snapshot_every, self.total_steps
            )));
        }
        Ok(())
    }
}

/// One run-log line, serialized as line-delimited JSON.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub sample_grids: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("ckpt_step_{step:06}.ckpt"))
}

/// Decode four fixed-seed samples into a 2×2 grid image.
fn sample_grid(
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    set: &TrainingSet,
    codec: &Codec,
    seed: u64,
) -> Result<crate::image::ImageGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SamplerConfig::uniform(DEFAULT_NUM_STEPS.min(schedule.t_max()));
    let (lh, lw, lc) = set.latent_shape;
    let (sh, sw, sc) = set.source_shape;
    let mut grid = ndarray::Array3::zeros((2 * sh, 2 * sw, sc));
    for cell in 0..4 {
        let noise = crate::nn::gaussian(&[lh, lw, lc], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("latent noise is 3d");
        let z0 = ddim_sample(noise, denoiser, schedule, &cfg, "")?;
        let latent = LatentGrid {
            values: z0,
            source_shape: set.source_shape,
            source_dynamic_range: set.dynamic_range,
        };
        let img = codec.decode(&latent)?;
        let (r0, c0) = ((cell / 2) * sh, (cell % 2) * sw);
        grid.slice_mut(ndarray::s![r0..r0 + sh, c0..c0 + sw, ..])
            .assign(&img.pixels);
    }
    crate::image::ImageGrid::new(grid, set.dynamic_range)
}

/// Stochastic-gradient training of the noise predictor (and text encoder)
/// on pre-encoded latents. Writes an initial checkpoint, a checkpoint and
/// fixed-seed sample grid at every `snapshot_every` steps, a final
/// checkpoint, and a per-step run log.
pub fn train_ddpm(
    set: &TrainingSet,
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    codec: &Codec,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if set.latents.is_empty() {
        return Err(Error::Param("training set must be non-empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let mut checkpoints = Vec::new();
    let mut sample_grids = Vec::new();
    let initial = checkpoint_path(out_dir, 0);
    denoiser.save_checkpoint(&initial)?;
    checkpoints.push(initial);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Separate stream so snapshot sampling never perturbs training draws.
    let grid_seed = cfg.seed.wrapping_add(0x9e37_79b9);
    let mut opt = SgdMomentum::new(cfg.learning_rate, 0.9);
    let n_elem = (set.latent_shape.0 * set.latent_shape.1 * set.latent_shape.2) as f64;
    let mut losses = Vec::with_capacity(cfg.total_steps);

    for step in 1..=cfg.total_steps {
        let start = Instant::now();
        let batch = draw_batch(set, cfg.batch_size, schedule.t_max(), &mut rng);
        let mut grads = GradStore::new();
        let mut loss_sum = 0.0;
        for sample in &batch {
            let z0 = &set.latents[sample.index];
            let z_t = crate::schedule::noise_with_alpha_bar(
                z0,
                schedule.alpha_bar(sample.t),
                &sample.eps,
            );
            let ids = crate::text::encode_prompt_ids(&sample.prompt, &denoiser.vocab)?;
            let enc = denoiser.text.encode(&ids)?;
            let (eps_hat, cache) = denoiser.forward_train(&z_t, sample.t, &enc.embedding)?;
            let residual = &eps_hat - &sample.eps;
            loss_sum += residual.mapv(|v| v * v).sum();
            // Gradient of the per-element mean: keeps the update scale
            // independent of latent size; the logged loss stays in the
            // per-sample sum convention.
            let d_eps = &residual * (2.0 / (n_elem * cfg.batch_size as f64));
            let d_cond = denoiser.backward(&cache, &d_eps, &mut grads);
            denoiser.text.backward(&enc.ids, &d_cond, &mut grads);
        }
        opt.step(&grads, |cb| denoiser.visit_params_mut(cb));
        let loss = loss_sum / cfg.batch_size as f64;
        losses.push(loss);
        let record = StepRecord { step, loss, wall_ms: start.elapsed().as_millis() as u64 };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;

        if step % cfg.snapshot_every == 0 {
            let path = checkpoint_path(out_dir, step);
            denoiser.save_checkpoint(&path)?;
            checkpoints.push(path);
            let grid = sample_grid(denoiser, schedule, set, codec, grid_seed)?;
            let grid_path = out_dir.join(format!("samples_step_{step:06}.png"));
            grid.save_png(&grid_path)?;
            sample_grids.push(grid_path);
        }
    }
    log.flush()?;

    let final_checkpoint = out_dir.join("model_final.ckpt");
    denoiser.save_checkpoint(&final_checkpoint)?;
    Ok(TrainReport { losses, checkpoints, sample_grids, final_checkpoint, log_path })
}
