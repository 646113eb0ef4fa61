//! Scoring: the metrics table and the synthetic-data classification harness.

use std::path::Path;

use sonargen_core::classifier::{classify_eval, manifest_images, ClassifyOutcome, SmallClassifier};
use sonargen_core::data::{self, DatasetManifest};
use sonargen_core::image::ImageGrid;
use sonargen_core::metrics::{
    extract_features, fid, inception_score, psnr, ssim, FeatureExtractor, MetricsReport, MetricsRow,
};
use sonargen_core::{Error, Result};

use crate::config::RunConfig;
use crate::run::RunContext;

/// `eval`: fit Gaussians in the extractor's feature space and tabulate
/// FID, SSIM, PSNR, and inception score per class.
pub fn eval(cfg: RunConfig, real: &Path, gen: &Path, extractor: Option<&Path>) -> Result<()> {
    let mut ctx = RunContext::new("eval", &cfg.out_dir)?;
    let real_manifest = data::load_manifest(real)?;
    let gen_manifest = data::load_manifest(gen)?;
    let (real_images, real_ids, real_labels) = manifest_images(&real_manifest)?;
    let (gen_images, gen_ids, gen_labels) = manifest_images(&gen_manifest)?;

    let classifier = match extractor {
        Some(path) => {
            let clf = SmallClassifier::load_checkpoint(path)?;
            if !clf.is_trained() {
                return Err(Error::Validation(format!(
                    "extractor checkpoint {} was never trained",
                    path.display()
                )));
            }
            clf
        }
        None => {
            // No extractor given: fit one on the real corpus so features
            // carry class structure.
            let input_side = real_images[0].pixels.dim().0;
            let clf_cfg = cfg.eval.to_core(real_labels.len(), input_side, cfg.seed);
            let mut clf = SmallClassifier::new(clf_cfg, real_labels.clone())?;
            clf.train(&real_images, &real_ids)?;
            clf.save_checkpoint(&ctx.path("extractor.ckpt"))?;
            ctx.add_file(&ctx.path("extractor.ckpt"))?;
            clf
        }
    };

    let real_features = extract_features(&real_images, &classifier)?;
    let gen_features = extract_features(&gen_images, &classifier)?;
    let gen_probs: Vec<Vec<f64>> =
        gen_images.iter().map(|img| classifier.predict_probs(img)).collect::<Result<_>>()?;

    let score = |real_idx: &[usize], gen_idx: &[usize], class: &str| -> Result<MetricsRow> {
        let real_rows: Vec<Vec<f64>> = real_idx.iter().map(|&i| real_features[i].clone()).collect();
        let gen_rows: Vec<Vec<f64>> = gen_idx.iter().map(|&i| gen_features[i].clone()).collect();
        let mut ssim_sum = 0.0;
        let mut psnr_sum = 0.0;
        for (j, &gi) in gen_idx.iter().enumerate() {
            let reference = &real_images[real_idx[j % real_idx.len()]];
            ssim_sum += ssim(&gen_images[gi], reference)?;
            psnr_sum += psnr(&gen_images[gi], reference)?;
        }
        let probs: Vec<Vec<f64>> = gen_idx.iter().map(|&i| gen_probs[i].clone()).collect();
        Ok(MetricsRow {
            class: class.to_string(),
            fid: fid(&real_rows, &gen_rows)?,
            ssim: ssim_sum / gen_idx.len() as f64,
            psnr: psnr_sum / gen_idx.len() as f64,
            is: inception_score(&probs)?,
            n_real: real_idx.len(),
            n_gen: gen_idx.len(),
        })
    };

    let mut rows = Vec::new();
    for label in &gen_labels {
        let real_idx = indices_of(&real_labels, &real_ids, label);
        let gen_idx = indices_of(&gen_labels, &gen_ids, label);
        if real_idx.len() < 2 || gen_idx.len() < 2 {
            println!(
                "skipping class '{label}': needs at least 2 real and 2 generated images, \
                 has {} and {}",
                real_idx.len(),
                gen_idx.len()
            );
            continue;
        }
        rows.push(score(&real_idx, &gen_idx, label)?);
    }
    let all_real: Vec<usize> = (0..real_images.len()).collect();
    let all_gen: Vec<usize> = (0..gen_images.len()).collect();
    let aggregate = score(&all_real, &all_gen, "all")?;

    let report = MetricsReport {
        extractor_id: classifier.id().to_string(),
        rows,
        aggregate,
    };
    report.save(&ctx.path("metrics_report.txt"))?;
    ctx.add_file(&ctx.path("metrics_report.txt"))?;
    ctx.write_json("metrics_report.json", &serde_json::to_value(&report)?)?;

    print!("{}", report.render());
    ctx.finish(super::resolved(
        "eval",
        &cfg,
        serde_json::json!({ "real": real, "gen": gen, "extractor": extractor }),
    ))
}

fn indices_of(labels: &[String], ids: &[usize], label: &str) -> Vec<usize> {
    let Some(target) = labels.iter().position(|l| l == label) else {
        return Vec::new();
    };
    ids.iter().enumerate().filter(|(_, &id)| id == target).map(|(i, _)| i).collect()
}

/// `classify`: train one classifier per provenance combination and report
/// test accuracy for each, combos across the columns.
pub fn classify(cfg: RunConfig, train: &Path, test: &Path) -> Result<()> {
    let mut ctx = RunContext::new("classify", &cfg.out_dir)?;
    let train_manifest = data::load_manifest(train)?;
    let test_manifest = data::load_manifest(test)?;
    let probe = probe_side(&test_manifest)?;
    let clf_cfg = cfg.eval.to_core(train_manifest.labels.len().max(2), probe, cfg.seed);
    let outcomes = classify_eval(&train_manifest, &test_manifest, &clf_cfg, cfg.seed)?;

    let table = render_outcomes(&outcomes);
    ctx.write_text("classify_report.txt", &table)?;
    ctx.write_json("classify_report.json", &serde_json::to_value(&outcomes)?)?;
    print!("{table}");
    ctx.finish(super::resolved(
        "classify",
        &cfg,
        serde_json::json!({ "train": train, "test": test }),
    ))
}

fn probe_side(manifest: &DatasetManifest) -> Result<usize> {
    let first = manifest
        .entries
        .first()
        .ok_or_else(|| Error::Validation("test manifest has no entries".into()))?;
    Ok(ImageGrid::load_png(&manifest.resolve(first))?.pixels.dim().0)
}

/// Provenance combinations across the columns, one metric per row.
fn render_outcomes(outcomes: &[ClassifyOutcome]) -> String {
    let mut header = format!("{:<10}", "metric");
    let mut accuracy = format!("{:<10}", "accuracy");
    let mut n_train = format!("{:<10}", "n_train");
    let mut n_test = format!("{:<10}", "n_test");
    for outcome in outcomes {
        header.push_str(&format!(" {:>15}", outcome.combo));
        accuracy.push_str(&format!(" {:>15.4}", outcome.accuracy));
        n_train.push_str(&format!(" {:>15}", outcome.n_train));
        n_test.push_str(&format!(" {:>15}", outcome.n_test));
    }
    format!("{header}\n{accuracy}\n{n_train}\n{n_test}\n")
}
