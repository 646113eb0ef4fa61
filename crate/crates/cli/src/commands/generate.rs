//! Sampling from trained checkpoints.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sonargen_core::codec::LatentGrid;
use sonargen_core::data::{DatasetManifest, ManifestEntry, Source};
use sonargen_core::denoiser::Denoiser;
use sonargen_core::gateway::Gateway;
use sonargen_core::lora::AdapterSet;
use sonargen_core::sampler::ddim_sample;
use sonargen_core::text::{parse_tags, TagKind};
use sonargen_core::{nn, Error, Result};

use crate::config::RunConfig;
use crate::run::RunContext;

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub n: Option<usize>,
    pub prompt: Vec<String>,
    pub prompts_file: Option<PathBuf>,
    pub expand_topic: Option<String>,
    pub adapters: Option<PathBuf>,
    pub merge: bool,
}

/// The toy label a prompt's tags imply: the first object tag decides, and
/// a prompt without one describes bare seafloor.
fn label_for_prompt(prompt: &str) -> String {
    for tag in parse_tags(prompt) {
        if tag.kind == TagKind::Object {
            return match tag.prefix.as_str() {
                "SH" => "ship",
                "PL" => "plane",
                "CYM" => "mine",
                _ => "object",
            }
            .to_string();
        }
    }
    "seafloor".to_string()
}

fn resolve_prompts(
    cfg: &RunConfig,
    ctx: &mut RunContext,
    args: &GenerateArgs,
) -> Result<Vec<String>> {
    if let Some(file) = &args.prompts_file {
        let text = std::fs::read_to_string(file).map_err(|e| {
            Error::Validation(format!("cannot read prompts file {}: {e}", file.display()))
        })?;
        let prompts: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        if prompts.is_empty() {
            return Err(Error::Validation(format!(
                "prompts file {} holds no prompts",
                file.display()
            )));
        }
        return Ok(prompts);
    }
    if !args.prompt.is_empty() {
        return Ok(args.prompt.clone());
    }
    if let Some(topic) = &args.expand_topic {
        let audit = ctx.path("gateway_audit.jsonl");
        let mut gateway = Gateway::new(cfg.gateway.to_core(cfg.seed, Some(audit.clone()))?)?;
        let prompts = gateway.expand_prompts(topic, args.n.unwrap_or(16))?;
        ctx.add_log(&audit)?;
        return Ok(prompts);
    }
    Err(Error::Validation(
        "generate needs --prompt, --prompts-file, or --expand-topic".into(),
    ))
}

fn attach_from_file(denoiser: &mut Denoiser, path: &Path, merge: bool) -> Result<()> {
    let (set, base_hash) = AdapterSet::load(path)?;
    if base_hash != denoiser.params_hash() {
        return Err(Error::Validation(format!(
            "adapter file {} was trained against base {}, but this checkpoint hashes to {}",
            path.display(),
            &base_hash[..12],
            &denoiser.params_hash()[..12]
        )));
    }
    denoiser.attach_adapters(set)?;
    if merge {
        denoiser.merge_adapters()?;
    }
    Ok(())
}

/// `generate`: sample images from a checkpoint, derive their labels from
/// the prompt tags, and write a manifest usable by eval and classify.
pub fn generate(cfg: RunConfig, args: GenerateArgs) -> Result<()> {
    let mut ctx = RunContext::new("generate", &cfg.out_dir)?;
    let mut denoiser = super::load_denoiser(&args.checkpoint)?;
    if let Some(adapter_path) = &args.adapters {
        attach_from_file(&mut denoiser, adapter_path, args.merge)?;
    }

    let prompts = resolve_prompts(&cfg, &mut ctx, &args)?;
    let n = args.n.unwrap_or(prompts.len());
    if n == 0 {
        return Err(Error::Validation("generate needs --n >= 1".into()));
    }

    let schedule = denoiser.schedule_spec.build()?;
    let codec = cfg.data.codec();
    let side = denoiser.config.latent_side;
    let channels = denoiser.config.latent_channels;
    let block = cfg.data.codec_block;
    if channels % (block * block) != 0 {
        return Err(Error::Config(format!(
            "checkpoint latents have {channels} channels, not decodable with data.codec_block={block}"
        )));
    }
    let source_shape = (side * block, side * block, channels / (block * block));

    std::fs::create_dir_all(ctx.path("images"))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let prompt = &prompts[i % prompts.len()];
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let noise = nn::gaussian(&[side, side, channels], 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("latent noise is 3d");
        let z0 = ddim_sample(noise, &mut denoiser, &schedule, &cfg.sampler, prompt)?;
        let latent = LatentGrid {
            values: z0,
            source_shape,
            source_dynamic_range: cfg.data.dynamic_range,
        };
        let image = codec.decode(&latent)?;
        let path = format!("images/gen_{i:04}.png");
        image.save_png(&ctx.path(&path))?;
        ctx.add_file(&ctx.path(&path))?;
        entries.push(ManifestEntry {
            path,
            label: label_for_prompt(prompt),
            source: Source::Generated,
            caption_low: Some(prompt.clone()),
            caption_high: None,
        });
    }

    let mut labels: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
    labels.sort();
    labels.dedup();
    let manifest = DatasetManifest {
        version: 1,
        labels,
        entries,
        base_dir: ctx.dir().to_path_buf(),
    };
    sonargen_core::data::save_manifest(&manifest, &ctx.path("manifest.json"))?;
    ctx.add_file(&ctx.path("manifest.json"))?;

    ctx.write_json(
        "generation.json",
        &serde_json::json!({
            "checkpoint": args.checkpoint,
            "phase": denoiser.phase,
            "merged_lora": denoiser.merged_lora,
            "adapters": args.adapters,
            "n": n,
            "prompts": prompts,
        }),
    )?;

    println!(
        "sampled {n} images from a '{}' checkpoint into {}",
        denoiser.phase,
        ctx.path("images").display()
    );
    ctx.finish(super::resolved(
        "generate",
        &cfg,
        serde_json::json!({
            "checkpoint": args.checkpoint,
            "adapters": args.adapters,
            "merge": args.merge,
            "n": n,
        }),
    ))
}

/// `sweep-steps`: sample one fixed prompt from every training snapshot in
/// a directory, reusing the same starting noise so the row shows training
/// progress alone.
pub fn sweep_steps(cfg: RunConfig, checkpoint_dir: &Path, prompt: Option<String>) -> Result<()> {
    let mut ctx = RunContext::new("sweep-steps", &cfg.out_dir)?;
    let snapshots = find_snapshots(checkpoint_dir)?;
    let prompt =
        prompt.unwrap_or_else(|| "image of SH1* ship on the AP1* seabed".to_string());

    let codec = cfg.data.codec();
    let block = cfg.data.codec_block;
    let mut noise: Option<ndarray::Array3<f64>> = None;
    let mut table = format!("{:>8} {}\n", "step", "file");
    let mut rows = Vec::with_capacity(snapshots.len());
    for (step, path) in &snapshots {
        let mut denoiser = super::load_denoiser(path)?;
        let schedule = denoiser.schedule_spec.build()?;
        let side = denoiser.config.latent_side;
        let channels = denoiser.config.latent_channels;
        let noise = noise
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                nn::gaussian(&[side, side, channels], 1.0, &mut rng)
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("latent noise is 3d")
            })
            .clone();
        let z0 = ddim_sample(noise, &mut denoiser, &schedule, &cfg.sampler, &prompt)?;
        let latent = LatentGrid {
            values: z0,
            source_shape: (side * block, side * block, channels / (block * block)),
            source_dynamic_range: cfg.data.dynamic_range,
        };
        let file = format!("sample_step_{step:06}.png");
        codec.decode(&latent)?.save_png(&ctx.path(&file))?;
        ctx.add_file(&ctx.path(&file))?;
        table.push_str(&format!("{step:>8} {file}\n"));
        rows.push(serde_json::json!({ "step": step, "file": file }));
    }

    ctx.write_text("sweep_steps.txt", &table)?;
    ctx.write_json("sweep_steps.json", &serde_json::Value::Array(rows))?;
    print!("{table}");
    ctx.finish(super::resolved(
        "sweep-steps",
        &cfg,
        serde_json::json!({ "checkpoint_dir": checkpoint_dir, "prompt": prompt }),
    ))
}

/// `ckpt_step_NNNNNN.ckpt` files under `dir`, ordered by step.
fn find_snapshots(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut snapshots = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| {
        Error::Validation(format!("cannot read checkpoint directory {}: {e}", dir.display()))
    })?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(step) = name
            .strip_prefix("ckpt_step_")
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|digits| digits.parse::<usize>().ok())
        {
            snapshots.push((step, path));
        }
    }
    if snapshots.is_empty() {
        return Err(Error::Validation(format!(
            "no ckpt_step_*.ckpt snapshots in {}",
            dir.display()
        )));
    }
    snapshots.sort();
    Ok(snapshots)
}
