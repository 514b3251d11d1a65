//! Prompt-embedding separation report with a 2-D PCA scatter.
//!
//! Prompts file format: `{"source": ["...", ...], "target": ["...", ...]}`.
//! Outputs `separation.json` and `separation_pca.csv`
//! (`family,encoder,prompt,pc1,pc2`).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stydeco_core::config::ExperimentConfig;
use stydeco_core::separation::{pca_2d, separation_of_pooled, SeparationReport};
use stydeco_core::text::TextDomain;
use stydeco_core::tokenizer::tokenize;
use stydeco_core::train::Models;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

pub const SEPARATION_JSON: &str = "separation.json";
pub const PCA_CSV: &str = "separation_pca.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptFamilies {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl PromptFamilies {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            source: cfg.prompts.source_family().iter().map(|s| s.to_string()).collect(),
            target: cfg.prompts.target_family().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let f: Self = serde_json::from_str(&text).at(path)?;
        if f.source.is_empty() || f.target.is_empty() {
            return Err(Error::Invalid(format!("{}: both prompt families must be non-empty", path.display())));
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationSummary {
    /// Source prompts through `E_s`, target prompts through `E_t`.
    pub domain: SeparationReport,
    /// Both families through the frozen base encoder.
    pub base: SeparationReport,
}

struct Pooled {
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

fn pool(models: &Models, cfg: &ExperimentConfig, prompts: &PromptFamilies, adapted: bool) -> Result<Pooled> {
    let max = cfg.text_encoder.max_tokens;
    let enc = |p: &str, d: TextDomain| -> Result<Vec<f64>> {
        let t = tokenize(p, max);
        let e = if adapted {
            models.text.encode_domain(&t, d)?
        } else {
            models.text.encode_base(&t)?
        };
        Ok(e.pooled())
    };
    Ok(Pooled {
        source: prompts.source.iter().map(|p| enc(p, TextDomain::Source)).collect::<Result<_>>()?,
        target: prompts.target.iter().map(|p| enc(p, TextDomain::Target)).collect::<Result<_>>()?,
    })
}

/// Separation of the domain embeddings and of the base embeddings.
pub fn separation_summary(models: &Models, cfg: &ExperimentConfig, prompts: &PromptFamilies) -> Result<SeparationSummary> {
    let d = pool(models, cfg, prompts, true)?;
    let b = pool(models, cfg, prompts, false)?;
    Ok(SeparationSummary {
        domain: separation_of_pooled(&d.source, &d.target)?,
        base: separation_of_pooled(&b.source, &b.target)?,
    })
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// PCA of all four embedding sets in one shared basis.
pub fn pca_csv(models: &Models, cfg: &ExperimentConfig, prompts: &PromptFamilies) -> Result<String> {
    let d = pool(models, cfg, prompts, true)?;
    let b = pool(models, cfg, prompts, false)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (enc, set) in [("domain", &d), ("base", &b)] {
        for (family, vecs, texts) in [("source", &set.source, &prompts.source), ("target", &set.target, &prompts.target)] {
            for (v, t) in vecs.iter().zip(texts) {
                rows.push(v.clone());
                labels.push((family, enc, t.as_str()));
            }
        }
    }
    let pts = pca_2d(&rows)?;
    let mut out = String::from("family,encoder,prompt,pc1,pc2\n");
    for ((family, enc, text), p) in labels.into_iter().zip(pts) {
        let _ = writeln!(out, "{family},{enc},{},{:.6},{:.6}", csv_field(text), p[0], p[1]);
    }
    Ok(out)
}

pub fn write_separation_report(
    models: &Models,
    cfg: &ExperimentConfig,
    prompts: &PromptFamilies,
    out_dir: &Path,
) -> Result<SeparationSummary> {
    let summary = separation_summary(models, cfg, prompts)?;
    write_atomic(
        &out_dir.join(SEPARATION_JSON),
        serde_json::to_string_pretty(&summary).expect("summary").as_bytes(),
    )?;
    write_atomic(&out_dir.join(PCA_CSV), pca_csv(models, cfg, prompts)?.as_bytes())?;
    Ok(summary)
}
