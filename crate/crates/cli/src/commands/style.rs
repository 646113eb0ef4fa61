//! Style-exemplar selection and attention-trace style transfer.

use std::collections::BTreeSet;
use std::path::Path;

use sonargen_core::data;
use sonargen_core::image::ImageGrid;
use sonargen_core::style::{self, StyleBlendConfig};
use sonargen_core::{Error, Result};

use crate::config::RunConfig;
use crate::run::RunContext;

fn blend_config(cfg: &RunConfig, gamma: f64) -> Result<StyleBlendConfig> {
    let mut blend = StyleBlendConfig::new(gamma, cfg.sampler.clone())?;
    blend.target_layers = cfg.style.target_layers.iter().cloned().collect::<BTreeSet<_>>();
    Ok(blend)
}

/// `cluster-styles`: pick cluster-exemplar images from a corpus and copy
/// them into the run directory.
pub fn cluster_styles(
    mut cfg: RunConfig,
    data_path: &Path,
    k: Option<usize>,
    per_cluster: Option<usize>,
) -> Result<()> {
    if let Some(k) = k {
        cfg.style.k = k;
    }
    if let Some(per_cluster) = per_cluster {
        cfg.style.per_cluster = per_cluster;
    }
    let mut ctx = RunContext::new("cluster-styles", &cfg.out_dir)?;
    let manifest = data::load_manifest(data_path)?;
    let selected =
        style::select_style_images(&manifest, cfg.style.k, cfg.style.per_cluster, cfg.seed)?;

    std::fs::create_dir_all(ctx.path("styles"))?;
    let mut listing = Vec::with_capacity(selected.len());
    for (i, source) in selected.iter().enumerate() {
        let file = format!("styles/style_{i:02}.png");
        std::fs::copy(source, ctx.path(&file))?;
        ctx.add_file(&ctx.path(&file))?;
        listing.push(serde_json::json!({ "file": file, "source": source }));
    }
    ctx.write_json("styles.json", &serde_json::Value::Array(listing))?;

    println!(
        "selected {} style exemplars ({} clusters x {} per cluster) into {}",
        selected.len(),
        cfg.style.k,
        cfg.style.per_cluster,
        ctx.path("styles").display()
    );
    ctx.finish(super::resolved("cluster-styles", &cfg, serde_json::json!({ "data": data_path })))
}

/// `stylize`: transfer the style of one image onto the content of another
/// through a trained checkpoint.
pub fn stylize(
    mut cfg: RunConfig,
    content: &Path,
    style_img: &Path,
    checkpoint: &Path,
    gamma: Option<f64>,
) -> Result<()> {
    if let Some(gamma) = gamma {
        cfg.style.gamma = gamma;
    }
    let mut ctx = RunContext::new("stylize", &cfg.out_dir)?;
    let blend = blend_config(&cfg, cfg.style.gamma)?;
    let mut denoiser = super::load_denoiser(checkpoint)?;
    let schedule = denoiser.schedule_spec.build()?;
    let codec = cfg.data.codec();
    let content_img = ImageGrid::load_png(content)?;
    let style_ref = ImageGrid::load_png(style_img)?;

    let report =
        style::stylize(&content_img, &style_ref, &blend, &codec, &mut denoiser, &schedule)?;

    report.image.save_png(&ctx.path("stylized.png"))?;
    ctx.add_file(&ctx.path("stylized.png"))?;
    ctx.write_json(
        "stylized.json",
        &serde_json::json!({
            "gamma": report.gamma,
            "ssim_vs_content": report.ssim_vs_content,
            "psnr_vs_content": report.psnr_vs_content,
        }),
    )?;

    println!(
        "stylized at gamma {:.2}: ssim vs content {:.4}, psnr {:.3} dB",
        report.gamma, report.ssim_vs_content, report.psnr_vs_content
    );
    ctx.finish(super::resolved(
        "stylize",
        &cfg,
        serde_json::json!({ "content": content, "style": style_img, "checkpoint": checkpoint }),
    ))
}

/// `sweep-gamma`: stylize one pair at several blending ratios and tabulate
/// fidelity against the content image.
pub fn sweep_gamma(
    cfg: RunConfig,
    content: &Path,
    style_img: &Path,
    checkpoint: &Path,
    gammas: Option<String>,
) -> Result<()> {
    let gammas = parse_gammas(gammas.as_deref())?;
    let mut ctx = RunContext::new("sweep-gamma", &cfg.out_dir)?;
    let blend = blend_config(&cfg, StyleBlendConfig::DEFAULT_GAMMA)?;
    let mut denoiser = super::load_denoiser(checkpoint)?;
    let schedule = denoiser.schedule_spec.build()?;
    let codec = cfg.data.codec();
    let content_img = ImageGrid::load_png(content)?;
    let style_ref = ImageGrid::load_png(style_img)?;

    // Inversion and capture happen once; only the injection pass depends
    // on gamma.
    let pair =
        style::prepare_pair(&content_img, &style_ref, &blend, &codec, &mut denoiser, &schedule)?;

    let mut table = format!("{:>6} {:>8} {:>9}\n", "gamma", "ssim", "psnr_db");
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in &gammas {
        let report = style::stylize_prepared(
            &pair,
            &content_img,
            gamma,
            &blend,
            &codec,
            &mut denoiser,
            &schedule,
        )?;
        let file = format!("stylized_gamma_{gamma:.2}.png");
        report.image.save_png(&ctx.path(&file))?;
        ctx.add_file(&ctx.path(&file))?;
        table.push_str(&format!(
            "{gamma:>6.2} {:>8.4} {:>9.3}\n",
            report.ssim_vs_content, report.psnr_vs_content
        ));
        rows.push(serde_json::json!({
            "gamma": gamma,
            "ssim": report.ssim_vs_content,
            "psnr": report.psnr_vs_content,
            "file": file,
        }));
    }

    ctx.write_text("sweep_gamma.txt", &table)?;
    ctx.write_json("sweep_gamma.json", &serde_json::Value::Array(rows))?;
    print!("{table}");
    ctx.finish(super::resolved(
        "sweep-gamma",
        &cfg,
        serde_json::json!({
            "content": content,
            "style": style_img,
            "checkpoint": checkpoint,
            "gammas": gammas,
        }),
    ))
}

fn parse_gammas(flag: Option<&str>) -> Result<Vec<f64>> {
    let Some(text) = flag else {
        return Ok(vec![0.3, 0.5, 0.75, 0.9]);
    };
    let gammas: Vec<f64> = text
        .split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| {
                Error::Validation(format!("--gammas entries must be numbers, got '{t}'"))
            })
        })
        .collect::<Result<_>>()?;
    if gammas.is_empty() {
        return Err(Error::Validation("--gammas needs at least one value".into()));
    }
    Ok(gammas)
}
