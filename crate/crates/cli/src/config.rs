//! Run configuration: one JSON file with a section per pipeline stage.
//!
//! Every section has defaults sized for the desk-scale toy pipeline, so a
//! missing or partial config file is valid. Unknown keys anywhere in the
//! file are rejected with a diagnostic naming the key. Command-line flags
//! override file values; the fully resolved config is written next to each
//! run's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sonargen_core::classifier::ClassifierConfig;
use sonargen_core::codec::{Codec, RangeMap};
use sonargen_core::denoiser::DenoiserConfig;
use sonargen_core::gateway::{self, GatewayConfig, GatewayMode};
use sonargen_core::sampler::{SamplerConfig, TrainConfig};
use sonargen_core::schedule::ScheduleSpec;
use sonargen_core::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stochastic stage derives its randomness from it.
    pub seed: u64,
    /// Where artifacts land when `--out` is not given.
    pub out_dir: PathBuf,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserSection,
    pub sampler: SamplerConfig,
    pub train: TrainSection,
    pub lora: LoraSection,
    pub style: StyleSection,
    pub gateway: GatewaySection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserSection::default(),
            sampler: SamplerConfig::default(),
            train: TrainSection::default(),
            lora: LoraSection::default(),
            style: StyleSection::default(),
            gateway: GatewaySection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the given file, if any. A config path that
    /// cannot be read or parsed is a validation error.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Validation(format!("config file {}: {e}", path.display()))
        })
    }
}

/// Denoiser shape without a seed field; initialization is seeded from the
/// run's master seed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub latent_channels: usize,
    pub latent_side: usize,
    pub widths: [usize; 3],
    pub heads: usize,
    pub d_cond: usize,
    pub max_len: usize,
    pub time_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_side: 16,
            widths: [12, 24, 32],
            heads: 1,
            d_cond: 24,
            max_len: 16,
            time_dim: 32,
        }
    }
}

impl DenoiserSection {
    pub fn to_core(&self, seed: u64) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.latent_channels,
            latent_side: self.latent_side,
            widths: self.widths,
            heads: self.heads,
            d_cond: self.d_cond,
            max_len: self.max_len,
            time_dim: self.time_dim,
            seed,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub snapshot_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { total_steps: 2000, batch_size: 4, learning_rate: 1e-2, snapshot_every: 500 }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64, steps_override: Option<usize>) -> TrainConfig {
        let total_steps = steps_override.unwrap_or(self.total_steps);
        TrainConfig {
            total_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            // Short runs still get one snapshot at the end.
            snapshot_every: self.snapshot_every.min(total_steps.max(1)),
            seed,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    /// Attention layers to adapt; empty means every attention layer.
    pub layers: Vec<String>,
    /// Projections to adapt within each layer, from {"q", "k", "v"}.
    pub projections: Vec<String>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            rank: sonargen_core::lora::DEFAULT_RANK,
            alpha: sonargen_core::lora::DEFAULT_ALPHA,
            layers: Vec::new(),
            projections: vec!["q".into(), "k".into(), "v".into()],
            total_steps: 300,
            batch_size: 2,
            learning_rate: 3e-3,
        }
    }
}

impl LoraSection {
    pub fn to_core(&self, seed: u64, steps_override: Option<usize>) -> TrainConfig {
        let total_steps = steps_override.unwrap_or(self.total_steps);
        TrainConfig {
            total_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            // Adapter training keeps no intermediate snapshots.
            snapshot_every: total_steps.max(1),
            seed,
        }
    }

    pub fn parsed_projections(&self) -> Result<Vec<sonargen_core::lora::ProjKind>> {
        use sonargen_core::lora::ProjKind;
        self.projections
            .iter()
            .map(|p| match p.as_str() {
                "q" => Ok(ProjKind::Q),
                "k" => Ok(ProjKind::K),
                "v" => Ok(ProjKind::V),
                other => Err(Error::Validation(format!(
                    "lora.projections entries must be 'q', 'k', or 'v', got '{other}'"
                ))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleSection {
    pub gamma: f64,
    /// Attention layers receiving injected features; empty means the
    /// model's default set (all self-attention layers).
    pub target_layers: Vec<String>,
    /// Cluster count for style-exemplar selection.
    pub k: usize,
    /// Exemplars taken per cluster, 1 to 3.
    pub per_cluster: usize,
}

impl Default for StyleSection {
    fn default() -> Self {
        Self {
            gamma: sonargen_core::style::StyleBlendConfig::DEFAULT_GAMMA,
            target_layers: Vec::new(),
            k: 4,
            per_cluster: 1,
        }
    }
}

/// Gateway settings without seed or audit path; the seed comes from the
/// run and the audit log always lands in the run's output directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewaySection {
    pub mode: GatewayMode,
    pub endpoint_url: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Stub,
            endpoint_url: None,
            timeout_ms: gateway::DEFAULT_TIMEOUT_MS,
            max_retries: gateway::DEFAULT_MAX_RETRIES,
            backoff_base_ms: gateway::DEFAULT_BACKOFF_BASE_MS,
        }
    }
}

impl GatewaySection {
    /// Core config with the environment overlay applied; `GATEWAY_MODE`,
    /// `GATEWAY_URL`, and `GATEWAY_TIMEOUT_MS` take precedence over the
    /// file values.
    pub fn to_core(&self, seed: u64, audit_path: Option<PathBuf>) -> Result<GatewayConfig> {
        GatewayConfig {
            mode: self.mode,
            endpoint_url: self.endpoint_url.clone(),
            timeout_ms: self.timeout_ms,
            max_retries: self.max_retries,
            backoff_base_ms: self.backoff_base_ms,
            seed,
            audit_path,
        }
        .with_env()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Toy corpus size.
    pub n: usize,
    /// Square image side in pixels.
    pub side: usize,
    /// Label fractions for the toy generator; must sum to one.
    pub class_mix: BTreeMap<String, f64>,
    pub codec_block: usize,
    pub codec_range: RangeMap,
    /// Pixel dynamic range of corpus images.
    pub dynamic_range: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let class_mix = sonargen_core::data::TOY_LABELS
            .iter()
            .map(|l| (l.to_string(), 0.25))
            .collect();
        Self {
            n: 256,
            side: 32,
            class_mix,
            codec_block: 2,
            codec_range: RangeMap::Unit,
            dynamic_range: 255.0,
        }
    }
}

impl DataSection {
    pub fn codec(&self) -> Codec {
        Codec { block: self.codec_block, range: self.codec_range }
    }
}

/// Classifier hyperparameters shared by the metrics extractor and the
/// synthetic-data classification harness.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = ClassifierConfig::default();
        Self { epochs: d.epochs, batch_size: d.batch_size, learning_rate: d.learning_rate }
    }
}

impl EvalSection {
    pub fn to_core(&self, n_classes: usize, input_side: usize, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            n_classes,
            input_side,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 9, "train": {"total_steps": 12}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.total_steps, 12);
        assert_eq!(cfg.train.batch_size, TrainSection::default().batch_size);
        assert_eq!(cfg.data.n, 256);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let top = serde_json::from_str::<RunConfig>(r#"{"sedd": 9}"#);
        assert!(top.unwrap_err().to_string().contains("sedd"));
        let nested = serde_json::from_str::<RunConfig>(r#"{"train": {"steps": 5}}"#);
        assert!(nested.unwrap_err().to_string().contains("steps"));
        let schedule = serde_json::from_str::<RunConfig>(r#"{"schedule": {"tmax": 5}}"#);
        assert!(schedule.unwrap_err().to_string().contains("tmax"));
    }

    #[test]
    fn missing_config_file_is_a_validation_error() {
        let err = RunConfig::load(Some(Path::new("/nonexistent/run.json"))).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("/nonexistent/run.json"));
    }

    #[test]
    fn bad_projection_name_is_reported() {
        let section = LoraSection { projections: vec!["z".into()], ..Default::default() };
        let err = section.parsed_projections().unwrap_err();
        assert!(err.to_string().contains("'z'"));
    }
}
