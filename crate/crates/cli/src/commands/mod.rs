//! One module per pipeline stage, plus helpers every command shares.

pub mod data;
pub mod evaluate;
pub mod generate;
pub mod style;
pub mod train;

use std::path::Path;

use sonargen_core::data::TrainingSet;
use sonargen_core::denoiser::Denoiser;
use sonargen_core::{Error, Result};

use crate::config::RunConfig;

/// The value written to `resolved_config.json`: the post-override config
/// plus the command's own arguments.
pub fn resolved(command: &str, cfg: &RunConfig, args: serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "command": command, "config": cfg, "args": args })
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    Denoiser::load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => {
            Error::Validation(format!("cannot read checkpoint {}: {io}", path.display()))
        }
        other => other,
    })
}

/// A corpus must encode to exactly the latent geometry the model was built
/// for; anything else is a configuration problem, not a runtime one.
pub fn check_latent_shape(set: &TrainingSet, side: usize, channels: usize) -> Result<()> {
    if set.latent_shape != (side, side, channels) {
        return Err(Error::Config(format!(
            "corpus encodes to latents {:?}, but denoiser.latent_side={side} and \
             denoiser.latent_channels={channels} require ({side}, {side}, {channels}); \
             adjust those fields or data.codec_block",
            set.latent_shape
        )));
    }
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Head and tail window means of a loss curve, for progress summaries.
pub fn loss_trend(losses: &[f64]) -> (usize, f64, f64) {
    let k = losses.len().min(100).max(1);
    (k, mean(&losses[..k.min(losses.len())]), mean(&losses[losses.len().saturating_sub(k)..]))
}
