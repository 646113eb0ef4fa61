//! Command line entry point: one subcommand per pipeline phase, one
//! config file, reproducible artifacts.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sonargen_core::{Error, Result};

use commands::generate::GenerateArgs;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "sonargen",
    version,
    about = "Latent diffusion pipeline for synthetic side-scan sonar imagery"
)]
struct Cli {
    /// Run configuration file (JSON); built-in defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the configured output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the deterministic toy sonar corpus with a manifest
    MakeToyData {
        /// Number of images, overriding the data section
        #[arg(long)]
        n: Option<usize>,
        /// Image side in pixels, overriding the data section
        #[arg(long)]
        side: Option<usize>,
    },
    /// Train the denoiser from scratch on tag-derived prompts
    TrainDdpm {
        /// Dataset manifest to train on
        #[arg(long)]
        data: PathBuf,
        /// Optimizer steps, overriding the train section
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pick k cluster-exemplar style images from a corpus
    ClusterStyles {
        /// Dataset manifest to cluster
        #[arg(long)]
        data: PathBuf,
        /// Number of clusters, overriding the style section
        #[arg(long)]
        k: Option<usize>,
        /// Exemplars per cluster, overriding the style section
        #[arg(long)]
        per_cluster: Option<usize>,
    },
    /// Blend one image's style into another's content through a checkpoint
    Stylize {
        /// Content image (PNG)
        #[arg(long)]
        content: PathBuf,
        /// Style image (PNG)
        #[arg(long)]
        style: PathBuf,
        /// Trained denoiser checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Style weight in [0, 1]; 1 keeps the content untouched
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Train low-rank adapters against a frozen checkpoint
    TrainLora {
        /// Dataset manifest to train on
        #[arg(long)]
        data: PathBuf,
        /// Trained denoiser checkpoint to adapt
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optimizer steps, overriding the lora section
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample images from a checkpoint and write a dataset manifest
    Generate {
        /// Trained denoiser checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images; defaults to one per prompt
        #[arg(long)]
        n: Option<usize>,
        /// Prompt to sample from; repeat for several
        #[arg(long)]
        prompt: Vec<String>,
        /// File with one prompt per line
        #[arg(long)]
        prompts_file: Option<PathBuf>,
        /// Ask the caption gateway to expand a topic into prompts
        #[arg(long)]
        expand_topic: Option<String>,
        /// Adapter file to attach before sampling
        #[arg(long)]
        adapters: Option<PathBuf>,
        /// Fold attached adapters into the base weights
        #[arg(long)]
        merge: bool,
    },
    /// Caption a corpus through the gateway and write an enriched manifest
    Caption {
        /// Dataset manifest to caption
        #[arg(long)]
        data: PathBuf,
        /// Instruction sent with every image
        #[arg(long)]
        domain_prompt: Option<String>,
    },
    /// Continue training a checkpoint on a fully captioned corpus
    Finetune {
        /// Dataset manifest where every entry carries both caption levels
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optimizer steps, overriding the train section
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score generated images against real ones and tabulate metrics
    Eval {
        /// Manifest of real images
        #[arg(long)]
        real: PathBuf,
        /// Manifest of generated images
        #[arg(long)]
        gen: PathBuf,
        /// Feature extractor checkpoint; trained on the real set when omitted
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Train classifiers per provenance combination and report accuracy
    Classify {
        /// Training manifest (may mix real and generated entries)
        #[arg(long)]
        train: PathBuf,
        /// Held-out test manifest of real images
        #[arg(long)]
        test: PathBuf,
    },
    /// Stylize one pair at several gammas and tabulate SSIM and PSNR
    SweepGamma {
        /// Content image (PNG)
        #[arg(long)]
        content: PathBuf,
        /// Style image (PNG)
        #[arg(long)]
        style: PathBuf,
        /// Trained denoiser checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated gamma values, e.g. 0.3,0.5,0.75,0.9
        #[arg(long)]
        gammas: Option<String>,
    },
    /// Sample one fixed prompt at every snapshot in a training run
    SweepSteps {
        /// Directory holding ckpt_step_*.ckpt snapshots
        #[arg(long)]
        checkpoint_dir: PathBuf,
        /// Prompt to sample; a tag-bearing default applies when omitted
        #[arg(long)]
        prompt: Option<String>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    match cli.command {
        Cmd::MakeToyData { n, side } => commands::data::make_toy_data(cfg, n, side),
        Cmd::TrainDdpm { data, steps } => commands::train::train_ddpm(cfg, &data, steps),
        Cmd::ClusterStyles { data, k, per_cluster } => {
            commands::style::cluster_styles(cfg, &data, k, per_cluster)
        }
        Cmd::Stylize { content, style, checkpoint, gamma } => {
            commands::style::stylize(cfg, &content, &style, &checkpoint, gamma)
        }
        Cmd::TrainLora { data, checkpoint, steps } => {
            commands::train::train_lora(cfg, &data, &checkpoint, steps)
        }
        Cmd::Generate { checkpoint, n, prompt, prompts_file, expand_topic, adapters, merge } => {
            commands::generate::generate(
                cfg,
                GenerateArgs { checkpoint, n, prompt, prompts_file, expand_topic, adapters, merge },
            )
        }
        Cmd::Caption { data, domain_prompt } => commands::data::caption(cfg, &data, domain_prompt),
        Cmd::Finetune { data, checkpoint, steps } => {
            commands::train::finetune(cfg, &data, &checkpoint, steps)
        }
        Cmd::Eval { real, gen, extractor } => {
            commands::evaluate::eval(cfg, &real, &gen, extractor.as_deref())
        }
        Cmd::Classify { train, test } => commands::evaluate::classify(cfg, &train, &test),
        Cmd::SweepGamma { content, style, checkpoint, gammas } => {
            commands::style::sweep_gamma(cfg, &content, &style, &checkpoint, gammas)
        }
        Cmd::SweepSteps { checkpoint_dir, prompt } => {
            commands::generate::sweep_steps(cfg, &checkpoint_dir, prompt)
        }
    }
}

/// Bad inputs exit 2; runtime failures (I/O, gateway, numerics) exit 1.
fn code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Shape(_)
        | Error::Param(_)
        | Error::Template(_)
        | Error::Ingestion(_)
        | Error::Stratification(_)
        | Error::Validation(_)
        | Error::Format(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(code_for(&err))
        }
    }
}
