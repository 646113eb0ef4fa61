//! Corpus creation and captioning.

use std::path::Path;

use sonargen_core::data::{self, CaptionFailure};
use sonargen_core::gateway::Gateway;
use sonargen_core::Result;

use crate::config::RunConfig;
use crate::run::RunContext;

/// `make-toy-data`: render a synthetic sonar corpus with manifest and
/// ground-truth log.
pub fn make_toy_data(mut cfg: RunConfig, n: Option<usize>, side: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        cfg.data.n = n;
    }
    if let Some(side) = side {
        cfg.data.side = side;
    }
    let mut ctx = RunContext::new("make-toy-data", &cfg.out_dir)?;
    let manifest =
        data::generate_toy_sonar(cfg.data.n, cfg.seed, &cfg.data.class_mix, cfg.data.side, ctx.dir())?;

    ctx.add_file(&ctx.path("manifest.json"))?;
    ctx.add_file(&ctx.path("genlog.jsonl"))?;
    for entry in &manifest.entries {
        ctx.add_file(&manifest.resolve(entry))?;
    }

    let counts = manifest.label_counts();
    let summary: Vec<String> = counts.iter().map(|(l, c)| format!("{l}: {c}")).collect();
    println!(
        "wrote {} images ({}) to {}",
        manifest.entries.len(),
        summary.join(", "),
        ctx.dir().display()
    );
    ctx.finish(super::resolved("make-toy-data", &cfg, serde_json::json!({})))
}

/// `caption`: run every corpus image through the gateway and write a
/// self-contained captioned copy of the corpus.
pub fn caption(cfg: RunConfig, data_path: &Path, domain_prompt: Option<String>) -> Result<()> {
    let mut ctx = RunContext::new("caption", &cfg.out_dir)?;
    let manifest = data::load_manifest(data_path)?;
    let domain_prompt = domain_prompt.unwrap_or_else(|| {
        "Describe the objects and seabed texture in this side-scan sonar image.".to_string()
    });

    let audit = ctx.path("gateway_audit.jsonl");
    let mut gateway = Gateway::new(cfg.gateway.to_core(cfg.seed, Some(audit.clone()))?)?;
    let report = data::build_caption_dataset(&manifest, &mut gateway, &domain_prompt)?;

    let mut captioned = report.manifest;
    for entry in &captioned.entries {
        let src = manifest.resolve(entry);
        let dst = ctx.path(&entry.path);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::copy(&src, &dst)?;
        ctx.add_file(&dst)?;
    }
    captioned.base_dir = ctx.dir().to_path_buf();
    data::save_manifest(&captioned, &ctx.path("manifest.json"))?;
    ctx.add_file(&ctx.path("manifest.json"))?;
    ctx.write_json("caption_failures.json", &serde_json::to_value(&report.failures)?)?;
    if audit.is_file() {
        ctx.add_log(&audit)?;
    }

    print_caption_summary(captioned.entries.len(), &report.failures);
    ctx.finish(super::resolved(
        "caption",
        &cfg,
        serde_json::json!({ "data": data_path, "domain_prompt": domain_prompt }),
    ))
}

fn print_caption_summary(total: usize, failures: &[CaptionFailure]) {
    if failures.is_empty() {
        println!("captioned {total} entries");
    } else {
        println!(
            "captioned {} of {total} entries; {} failed (first: {})",
            total - failures.len(),
            failures.len(),
            failures[0].path
        );
    }
}
