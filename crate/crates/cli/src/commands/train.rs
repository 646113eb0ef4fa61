//! Training stages: base model, adapter-only, and captioned fine-tuning.

use std::io::Write;
use std::path::Path;

use sonargen_core::data::{self, TrainingSet};
use sonargen_core::denoiser::Denoiser;
use sonargen_core::lora::{AdapterSet, LoraAdapter};
use sonargen_core::sampler::{self, TrainReport};
use sonargen_core::text::Vocabulary;
use sonargen_core::{Error, Result};

use crate::config::RunConfig;
use crate::run::RunContext;

fn vocabulary_from(set: &TrainingSet) -> Vocabulary {
    let captions = set
        .captions_low
        .iter()
        .map(String::as_str)
        .chain(set.captions_high.iter().flatten().map(String::as_str));
    Vocabulary::build(captions)
}

fn record_train_outputs(ctx: &mut RunContext, report: &TrainReport) -> Result<()> {
    ctx.add_files(&report.checkpoints)?;
    ctx.add_files(&report.sample_grids)?;
    ctx.add_file(&report.final_checkpoint)?;
    ctx.add_log(&report.log_path)
}

fn print_trend(losses: &[f64]) {
    let (k, first, last) = super::loss_trend(losses);
    println!(
        "{} steps; loss mean over first {k}: {first:.3}, over last {k}: {last:.3}",
        losses.len()
    );
}

/// `train-ddpm`: train a fresh noise predictor on a captioned corpus.
pub fn train_ddpm(mut cfg: RunConfig, data_path: &Path, steps: Option<usize>) -> Result<()> {
    if let Some(steps) = steps {
        cfg.train.total_steps = steps;
    }
    let mut ctx = RunContext::new("train-ddpm", &cfg.out_dir)?;
    let manifest = data::load_manifest(data_path)?;
    let codec = cfg.data.codec();
    let set = data::load_training_set(&manifest, &codec)?;
    super::check_latent_shape(&set, cfg.denoiser.latent_side, cfg.denoiser.latent_channels)?;

    let vocab = vocabulary_from(&set);
    let mut denoiser = Denoiser::new(cfg.denoiser.to_core(cfg.seed), vocab, cfg.schedule)?;
    // Tag-prompted coarse training; checkpoints carry the stage name.
    denoiser.phase = "phase2".to_string();

    let schedule = cfg.schedule.build()?;
    let train_cfg = cfg.train.to_core(cfg.seed, None);
    let report = sampler::train_ddpm(&set, &mut denoiser, &schedule, &codec, &train_cfg, ctx.dir())?;

    record_train_outputs(&mut ctx, &report)?;
    print_trend(&report.losses);
    ctx.finish(super::resolved("train-ddpm", &cfg, serde_json::json!({ "data": data_path })))
}

/// `finetune`: continue training a checkpoint on a corpus where every
/// entry carries both caption levels.
pub fn finetune(
    mut cfg: RunConfig,
    data_path: &Path,
    checkpoint: &Path,
    steps: Option<usize>,
) -> Result<()> {
    if let Some(steps) = steps {
        cfg.train.total_steps = steps;
    }
    let mut ctx = RunContext::new("finetune", &cfg.out_dir)?;
    let manifest = data::load_manifest(data_path)?;

    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.caption_low.is_none() || e.caption_high.is_none())
        .map(|e| e.path.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "finetune needs caption_low and caption_high on every entry; {} of {} entries \
             lack them (first: {})",
            missing.len(),
            manifest.entries.len(),
            missing[0]
        )));
    }

    let mut denoiser = super::load_denoiser(checkpoint)?;
    let codec = cfg.data.codec();
    let set = data::load_training_set(&manifest, &codec)?;
    check_against_checkpoint(&set, &denoiser)?;
    denoiser.phase = "phase3".to_string();

    // The checkpoint's schedule takes precedence over the config section:
    // training must continue under the process the weights were fit to.
    let schedule = denoiser.schedule_spec.build()?;
    let train_cfg = cfg.train.to_core(cfg.seed, None);
    let report = sampler::train_ddpm(&set, &mut denoiser, &schedule, &codec, &train_cfg, ctx.dir())?;

    record_train_outputs(&mut ctx, &report)?;
    print_trend(&report.losses);
    ctx.finish(super::resolved(
        "finetune",
        &cfg,
        serde_json::json!({ "data": data_path, "checkpoint": checkpoint }),
    ))
}

/// `train-lora`: optimize low-rank adapters against a frozen checkpoint.
pub fn train_lora(
    cfg: RunConfig,
    data_path: &Path,
    checkpoint: &Path,
    steps: Option<usize>,
) -> Result<()> {
    let mut ctx = RunContext::new("train-lora", &cfg.out_dir)?;
    let mut denoiser = super::load_denoiser(checkpoint)?;
    let manifest = data::load_manifest(data_path)?;
    let codec = cfg.data.codec();
    let set = data::load_training_set(&manifest, &codec)?;
    check_against_checkpoint(&set, &denoiser)?;

    let layers = if cfg.lora.layers.is_empty() {
        denoiser.attention_layer_ids()
    } else {
        cfg.lora.layers.clone()
    };
    let projections = cfg.lora.parsed_projections()?;
    let mut adapters = AdapterSet::new();
    for (i, layer) in layers.iter().enumerate() {
        for (j, &proj) in projections.iter().enumerate() {
            let (m, n) = denoiser.projection_shape(layer, proj).ok_or_else(|| {
                Error::Validation(format!(
                    "lora.layers entry '{layer}' is not an attention layer of this model"
                ))
            })?;
            let salt = (i * projections.len() + j + 1) as u64;
            adapters.insert(LoraAdapter::init(
                m,
                n,
                cfg.lora.rank,
                cfg.lora.alpha,
                (layer.clone(), proj),
                cfg.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )?)?;
        }
    }
    let n_adapters = adapters.len();
    denoiser.attach_adapters(adapters)?;

    let schedule = denoiser.schedule_spec.build()?;
    let train_cfg = cfg.lora.to_core(cfg.seed, steps);
    let report = sonargen_core::lora::train_lora(&set, &mut denoiser, &schedule, &train_cfg)?;

    let adapter_path = ctx.path("adapters.lora");
    denoiser.adapters.save(&adapter_path, &report.base_hash)?;
    ctx.add_file(&adapter_path)?;

    let log_path = ctx.path("lora_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for (step, loss) in report.losses.iter().enumerate() {
        writeln!(log, "{}", serde_json::json!({ "step": step + 1, "loss": loss }))?;
    }
    log.flush()?;
    ctx.add_file(&log_path)?;

    println!("trained {n_adapters} adapters against base {}", &report.base_hash[..12]);
    print_trend(&report.losses);
    ctx.finish(super::resolved(
        "train-lora",
        &cfg,
        serde_json::json!({ "data": data_path, "checkpoint": checkpoint }),
    ))
}

fn check_against_checkpoint(set: &TrainingSet, denoiser: &Denoiser) -> Result<()> {
    let want = (
        denoiser.config.latent_side,
        denoiser.config.latent_side,
        denoiser.config.latent_channels,
    );
    if set.latent_shape != want {
        return Err(Error::Validation(format!(
            "corpus encodes to latents {:?}, but the checkpoint was trained on {:?}; \
             use a matching corpus or data.codec_block",
            set.latent_shape, want
        )));
    }
    Ok(())
}
