//! `stydeco` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing inputs),
//! 2 runtime failure. The last stdout line is a JSON summary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;
use stydeco::checkpoint::load_checkpoint;
use stydeco::config_io::{load_config, CONFIG_ENV};
use stydeco::core::config::ExperimentConfig;
use stydeco::core::metrics::MetricSuite;
use stydeco::distill::{client_from_config, distill};
use stydeco::evaluate::{evaluate_dirs, write_report};
use stydeco::inference::{run_inference, Direction, Translator};
use stydeco::report::{write_separation_report, PromptFamilies};
use stydeco::trainer::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "stydeco", version, about = "Text-guided style transfer with cycle-consistent LoRA training")]
struct Cli {
    /// JSON experiment config; defaults are used when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Directory relative paths are resolved against.
    #[arg(long, global = true, env = "STYDECO_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build pseudo-pairs from a directory of source images.
    Distill {
        /// Source images (default: paths.source_dir).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Output directory for `pseudo/` and `manifest.jsonl`
        /// (default: the directory of paths.manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train adapters on a manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Continue from the latest checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps (a checkpoint is written).
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Photo → painting.
    Stylize(InferArgs),
    /// Painting → photo.
    Destylize(InferArgs),
    /// Compute FID / SSIM / LPIPS / CLIP-ae for a generated set.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        /// Reference set for FID.
        #[arg(long)]
        reference: PathBuf,
        /// Inputs the generated images were produced from (paired by stem).
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "stydeco")]
        method: String,
    },
    /// Embedding separation statistics and a PCA scatter.
    SeparationReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `{"source": [...], "target": [...]}`; default: the config families.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    /// A file (for a file input) or a directory.
    #[arg(long)]
    output: PathBuf,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg))
}

fn require_dir(p: &Path, what: &str) -> Result<(), Failure> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", p.display())))
    }
}

fn require_exists(p: &Path, what: &str) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", p.display())))
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require_exists(p, "config")?;
            let loaded = load_config(p).map_err(|e| Failure::Usage(e.into()))?;
            for w in &loaded.warnings {
                eprintln!("warning: {w}");
            }
            loaded.config
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    if let Some(w) = &cli.workdir {
        require_dir(w, "workdir")?;
        std::env::set_current_dir(w).with_context(|| format!("entering {}", w.display()))?;
    }
    let cfg = load(&cli)?;
    Ok(match &cli.command {
        Command::Distill { source, out } => {
            let source = source.clone().unwrap_or_else(|| cfg.paths.source_dir.clone().into());
            let out = out.clone().unwrap_or_else(|| {
                Path::new(&cfg.paths.manifest)
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default()
            });
            require_dir(&source, "source directory")?;
            let client = client_from_config(&cfg.distill)?;
            let s = distill(client.as_ref(), &source, &out, &cfg)?;
            eprintln!("distilled {} pairs ({} skipped)", s.pairs, s.skipped);
            json!({"command": "distill", "status": "ok", "manifest": s.manifest, "pairs": s.pairs,
                   "skipped": s.skipped, "source_count": s.source_count})
        }
        Command::Train {
            manifest,
            checkpoints,
            resume,
            stop_at,
            log_every,
        } => {
            let manifest = manifest.clone().unwrap_or_else(|| cfg.paths.manifest.clone().into());
            require_exists(&manifest, "manifest")?;
            let mut opts = TrainOptions::new(
                manifest,
                checkpoints.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone().into()),
            );
            opts.resume = *resume;
            opts.stop_at = *stop_at;
            opts.log_every = *log_every;
            let s = train(&cfg, &opts)?;
            json!({"command": "train", "status": "ok", "steps": s.steps_completed,
                   "initial_total": s.initial_loss.total, "final_total": s.final_loss.total,
                   "validation_cycle_l1": s.validation_cycle_l1, "checkpoint": s.checkpoint})
        }
        Command::Stylize(a) | Command::Destylize(a) => {
            let dir = if matches!(cli.command, Command::Stylize(_)) {
                Direction::Stylize
            } else {
                Direction::Destylize
            };
            require_exists(&a.checkpoint, "checkpoint")?;
            require_exists(&a.input, "input")?;
            let t = Translator::load(&a.checkpoint)?;
            let s = run_inference(&t, &a.input, &a.output, dir)?;
            json!({"command": dir.as_str(), "status": "ok", "outputs": s.outputs.len(), "output": a.output})
        }
        Command::Evaluate {
            generated,
            reference,
            sources,
            out,
            method,
        } => {
            require_dir(generated, "generated directory")?;
            require_dir(reference, "reference directory")?;
            require_dir(sources, "sources directory")?;
            let suite = MetricSuite::toy(cfg.metrics_seed, cfg.perceptual_seed);
            let r = evaluate_dirs(generated, reference, sources, cfg.image_size, &suite, method)?;
            write_report(&r, out)?;
            let m = &r.metrics;
            json!({"command": "evaluate", "status": "ok", "FID": m.fid, "SSIM": m.ssim_mean,
                   "LPIPS": m.lpips_mean, "CLIP-ae": m.clip_ae_mean, "report": out.join(stydeco::evaluate::REPORT_CSV)})
        }
        Command::SeparationReport { checkpoint, prompts, out } => {
            require_exists(checkpoint, "checkpoint")?;
            let ck = load_checkpoint(checkpoint, None)?;
            let families = match prompts {
                Some(p) => {
                    require_exists(p, "prompts file")?;
                    PromptFamilies::load(p)?
                }
                None => PromptFamilies::from_config(&ck.config),
            };
            let s = write_separation_report(&ck.models, &ck.config, &families, out)?;
            json!({"command": "separation-report", "status": "ok", "silhouette": s.domain.silhouette,
                   "base_silhouette": s.base.silhouette, "out": out})
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (code, e, kind) = match f {
                Failure::Usage(e) => (1, e, "usage"),
                Failure::Runtime(e) => (2, e, "runtime"),
            };
            eprintln!("error: {e:#}");
            println!("{}", json!({"status": "error", "kind": kind, "message": format!("{e:#}")}));
            ExitCode::from(code)
        }
    }
}
