//! The training loop: data loading, batching, checkpointing and logs.
//!
//! Outputs under the checkpoint root:
//! - `step-NNNNNN/` checkpoints and `latest.json`
//! - `loss_history.csv`: `step,cycle_l1,perceptual,separation,total,grad_norm`
//! - `run.json`: the full-set loss measured before the first step
//! - `train_summary.json`: final losses of the latest invocation

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stydeco_core::batching::BatchPlan;
use stydeco_core::config::ExperimentConfig;
use stydeco_core::losses::LossBreakdown;
use stydeco_core::rng::derive_seed;
use stydeco_core::train::{
    evaluate_losses, training_step, validation_cycle_l1, Models, Objective, PairSample, PromptSet, StepReport,
    TrainState,
};

use crate::checkpoint::{has_checkpoint, load_checkpoint, resolve_checkpoint, save_checkpoint, step_dir_name};
use crate::distill::load_pair;
use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;
use crate::manifest::read_manifest;

pub const HISTORY_FILE: &str = "loss_history.csv";
pub const HISTORY_HEADER: &str = "step,cycle_l1,perceptual,separation,total,grad_norm";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "train_summary.json";

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Continue from the latest checkpoint in `checkpoint_dir` if present.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are done, even if
    /// `train_steps` is larger. Used to simulate interruptions.
    pub stop_at: Option<u64>,
    /// Print a progress line every this many steps (0 = silent).
    pub log_every: u64,
}

impl TrainOptions {
    pub fn new(manifest: impl Into<PathBuf>, checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            checkpoint_dir: checkpoint_dir.into(),
            resume: false,
            stop_at: None,
            log_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct RunFile {
    initial_loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_completed: u64,
    pub train_steps: u64,
    pub pairs: usize,
    /// Full-set loss before any update.
    pub initial_loss: LossBreakdown,
    /// Full-set loss after the last update.
    pub final_loss: LossBreakdown,
    pub validation_cycle_l1: f64,
    pub checkpoint: PathBuf,
    pub resumed_from: Option<u64>,
}

/// One history row per completed step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
}

impl From<StepReport> for HistoryRow {
    fn from(r: StepReport) -> Self {
        Self {
            step: r.step,
            losses: r.losses,
            grad_norm: r.grad_norm,
        }
    }
}

fn history_line(r: &HistoryRow) -> String {
    // `{:?}` prints the shortest representation that round-trips exactly.
    let l = &r.losses;
    format!(
        "{},{:?},{:?},{:?},{:?},{:?}",
        r.step, l.cycle_l1, l.perceptual, l.separation, l.total, r.grad_norm
    )
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Invalid(format!("{}: line {}: malformed history row", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(HistoryRow {
            step: f[0].parse().map_err(|_| bad())?,
            losses: LossBreakdown {
                cycle_l1: num(f[1])?,
                perceptual: num(f[2])?,
                separation: num(f[3])?,
                total: num(f[4])?,
            },
            grad_norm: num(f[5])?,
        });
    }
    Ok(rows)
}

fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in rows {
        let _ = writeln!(text, "{}", history_line(r));
    }
    write_atomic(path, text.as_bytes())
}

/// Loads every pair of the manifest at `size`.
pub fn load_pairs(manifest_path: &Path, size: usize) -> Result<Vec<PairSample>> {
    let manifest = read_manifest(manifest_path)?;
    manifest
        .pairs
        .iter()
        .map(|p| load_pair(manifest_path, p, size).map(|(source, pseudo)| PairSample { source, pseudo }))
        .collect()
}

/// Size-weighted mean loss over all pairs, evaluated in `chunk`-sized
/// batches.
pub fn full_set_loss(models: &Models, prompts: &PromptSet, pairs: &[PairSample], obj: &Objective, chunk: usize) -> Result<LossBreakdown> {
    let mut acc = [0.0f64; 4];
    for c in pairs.chunks(chunk.max(1)) {
        let l = evaluate_losses(models, prompts, c, obj)?;
        let w = c.len() as f64 / pairs.len() as f64;
        acc[0] += w * l.cycle_l1;
        acc[1] += w * l.perceptual;
        acc[2] += w * l.separation;
        acc[3] += w * l.total;
    }
    Ok(LossBreakdown {
        cycle_l1: acc[0],
        perceptual: acc[1],
        separation: acc[2],
        total: acc[3],
    })
}

/// The micro-batch schedule: seeded per-epoch permutations of the pairs.
pub fn batch_plan(cfg: &ExperimentConfig, n_pairs: usize) -> BatchPlan {
    BatchPlan::new(n_pairs, cfg.batch_size, derive_seed(cfg.seed, "batches"))
}

/// Removes the artifacts of an earlier run (only files this module writes).
fn clear_run(root: &Path) -> Result<()> {
    if !root.is_dir() {
        return Ok(());
    }
    for entry in std::fs::read_dir(root).at(root)? {
        let p = entry.at(root)?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if p.is_dir() && name.starts_with("step-") {
            std::fs::remove_dir_all(&p).at(&p)?;
        } else if [HISTORY_FILE, RUN_FILE, SUMMARY_FILE, crate::checkpoint::LATEST_FILE].contains(&name.as_str()) {
            std::fs::remove_file(&p).at(&p)?;
        }
    }
    Ok(())
}

/// Runs (or resumes) training as configured. Without `resume`, artifacts
/// of an earlier run in the checkpoint root are removed first.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let report = cfg.validate();
    if !report.is_valid() {
        return Err(Error::Config(report.to_string()));
    }
    let pairs = load_pairs(&opts.manifest, cfg.image_size)?;
    let prompts = PromptSet::from_config(cfg)?;
    let obj = Objective::from_config(cfg);
    let root = &opts.checkpoint_dir;
    let history_path = root.join(HISTORY_FILE);
    let run_path = root.join(RUN_FILE);

    let (mut models, mut state, mut history, initial_loss, resumed_from) = if opts.resume && has_checkpoint(root) {
        let ck = load_checkpoint(root, Some(cfg))?;
        let step = ck.state.step;
        let history: Vec<HistoryRow> = if history_path.is_file() {
            read_history(&history_path)?.into_iter().filter(|r| r.step < step).collect()
        } else {
            Vec::new()
        };
        let run: RunFile = serde_json::from_str(&std::fs::read_to_string(&run_path).at(&run_path)?).at(&run_path)?;
        (ck.models, ck.state, history, run.initial_loss, Some(step))
    } else {
        clear_run(root)?;
        let models = Models::init(cfg)?;
        let initial_loss = full_set_loss(&models, &prompts, &pairs, &obj, cfg.batch_size)?;
        let run = RunFile { initial_loss };
        write_atomic(&run_path, serde_json::to_string_pretty(&run).expect("run").as_bytes())?;
        (models, TrainState::new(cfg.training_mode), Vec::new(), initial_loss, None)
    };
    if state.mode != cfg.training_mode {
        return Err(Error::Invalid(format!(
            "checkpoint was trained in mode {}, config says {}",
            state.mode.as_str(),
            cfg.training_mode.as_str()
        )));
    }

    let plan = batch_plan(cfg, pairs.len());
    let target = opts
        .stop_at
        .map_or(cfg.train_steps as u64, |s| s.min(cfg.train_steps as u64));
    while state.step < target {
        let micro: Vec<Vec<PairSample>> = (0..cfg.grad_accum_steps as u64)
            .map(|k| {
                plan.batch_at(state.batches_consumed + k)
                    .into_iter()
                    .map(|i| pairs[i].clone())
                    .collect()
            })
            .collect();
        let report = training_step(&mut models, &prompts, &micro, &mut state, cfg)?;
        if opts.log_every > 0 && (report.step + 1) % opts.log_every == 0 {
            eprintln!(
                "step {:>5}  total {:.5}  l1 {:.5}  perc {:.5}  sep {:.5}  |g| {:.4}",
                report.step + 1,
                report.losses.total,
                report.losses.cycle_l1,
                report.losses.perceptual,
                report.losses.separation,
                report.grad_norm
            );
        }
        history.push(report.into());
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
            save_checkpoint(root, &models, &state, cfg)?;
            write_history(&history_path, &history)?;
        }
    }
    let checkpoint = match resolve_checkpoint(&root.join(step_dir_name(state.step))) {
        Ok(dir) => dir,
        Err(_) => save_checkpoint(root, &models, &state, cfg)?,
    };
    write_history(&history_path, &history)?;

    let final_loss = full_set_loss(&models, &prompts, &pairs, &obj, cfg.batch_size)?;
    let n_val = cfg.validation_images.min(pairs.len());
    let val: Vec<_> = pairs[..n_val].iter().map(|p| p.source.clone()).collect();
    let summary = TrainSummary {
        steps_completed: state.step,
        train_steps: cfg.train_steps as u64,
        pairs: pairs.len(),
        initial_loss,
        final_loss,
        validation_cycle_l1: validation_cycle_l1(&models, &prompts, &val)?,
        checkpoint,
        resumed_from,
    };
    write_atomic(
        &root.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary").as_bytes(),
    )?;
    Ok(summary)
}
