//! Directory-level evaluation producing the four-metric table.
//!
//! Generated images are paired with source images by file stem; FID is
//! computed against an independent reference set.
//!
//! `report.csv`:
//!
//! ```text
//! method,FID,SSIM,LPIPS,CLIP-ae,n_generated,n_reference
//! stydeco,12.3456,0.4321,0.1234,5.0123,16,16
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stydeco_core::metrics::{evaluate_sets, MetricSuite, MetricsReport};
use stydeco_core::ImageTensor;

use crate::error::{Error, Result};
use crate::fsutil::{file_stem, list_images, write_atomic};
use crate::imageio::load_image;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const TABLE_COLUMNS: [&str; 7] = ["method", "FID", "SSIM", "LPIPS", "CLIP-ae", "n_generated", "n_reference"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub metrics: MetricsReport,
    pub generated_dir: PathBuf,
    pub reference_dir: PathBuf,
    pub source_dir: PathBuf,
}

impl EvaluationReport {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{}\n{},{:.4},{:.4},{:.4},{:.4},{},{}\n",
            TABLE_COLUMNS.join(","),
            self.method,
            m.fid,
            m.ssim_mean,
            m.lpips_mean,
            m.clip_ae_mean,
            m.n_generated,
            m.n_reference
        )
    }
}

/// Matches files of `generated` and `sources` by stem. Every file must have
/// a partner; otherwise all unmatched files are reported.
pub fn pair_by_stem(generated: &[PathBuf], sources: &[PathBuf]) -> Result<Vec<(PathBuf, PathBuf)>> {
    let g: BTreeMap<String, &PathBuf> = generated.iter().map(|p| (file_stem(p), p)).collect();
    let s: BTreeMap<String, &PathBuf> = sources.iter().map(|p| (file_stem(p), p)).collect();
    let mut unmatched: Vec<String> = Vec::new();
    unmatched.extend(g.iter().filter(|(k, _)| !s.contains_key(*k)).map(|(_, p)| p.display().to_string()));
    unmatched.extend(s.iter().filter(|(k, _)| !g.contains_key(*k)).map(|(_, p)| p.display().to_string()));
    if g.len() != generated.len() || s.len() != sources.len() {
        return Err(Error::Invalid("two files share a stem".into()));
    }
    if !unmatched.is_empty() {
        return Err(Error::Unpairable(unmatched));
    }
    Ok(g.into_iter().map(|(k, p)| (p.clone(), s[&k].clone())).collect())
}

fn load_all(paths: &[PathBuf], size: usize) -> Result<Vec<ImageTensor>> {
    paths.iter().map(|p| load_image(p, size)).collect()
}

/// Evaluates `generated_dir` against `reference_dir` (FID) and
/// `source_dir` (SSIM/LPIPS), with all images resized to `size`.
pub fn evaluate_dirs(
    generated_dir: &Path,
    reference_dir: &Path,
    source_dir: &Path,
    size: usize,
    suite: &MetricSuite,
    method: &str,
) -> Result<EvaluationReport> {
    let pairs = pair_by_stem(&list_images(generated_dir)?, &list_images(source_dir)?)?;
    let (gen_paths, src_paths): (Vec<PathBuf>, Vec<PathBuf>) = pairs.into_iter().unzip();
    let generated = load_all(&gen_paths, size)?;
    let sources = load_all(&src_paths, size)?;
    let reference = load_all(&list_images(reference_dir)?, size)?;
    let metrics = evaluate_sets(&generated, &reference, &sources, suite)?;
    Ok(EvaluationReport {
        method: method.to_string(),
        metrics,
        generated_dir: generated_dir.to_path_buf(),
        reference_dir: reference_dir.to_path_buf(),
        source_dir: source_dir.to_path_buf(),
    })
}

pub fn write_report(report: &EvaluationReport, out_dir: &Path) -> Result<()> {
    write_atomic(&out_dir.join(REPORT_CSV), report.csv().as_bytes())?;
    write_atomic(
        &out_dir.join(REPORT_JSON),
        serde_json::to_string_pretty(report).expect("report serializes").as_bytes(),
    )
}
