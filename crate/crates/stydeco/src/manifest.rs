//! The persisted pseudo-pair dataset.
//!
//! File format (UTF-8, one JSON object per line):
//!
//! ```text
//! {"format":"stydeco-manifest","version":1,"domain_tag":"paired","created_seed":42,"count":2}
//! {"source_path":"...","pseudo_path":"...","source_prompt":"...","target_prompt":"...","generator_id":"...","seed":42}
//! {"source_path":"...", ...}
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stydeco_core::batching::BatchPlan;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

pub const MANIFEST_FORMAT: &str = "stydeco-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoPair {
    pub source_path: String,
    pub pseudo_path: String,
    pub source_prompt: String,
    pub target_prompt: String,
    pub generator_id: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
    Paired,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub pairs: Vec<PseudoPair>,
    pub domain_tag: DomainTag,
    pub created_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    domain_tag: DomainTag,
    created_seed: u64,
    count: usize,
}

impl DatasetManifest {
    pub fn check(&self) -> Result<()> {
        if self.domain_tag == DomainTag::Paired && self.pairs.is_empty() {
            return Err(Error::Manifest("a paired manifest needs at least one pair".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if !seen.insert(p.source_path.as_str()) {
                return Err(Error::Manifest(format!("duplicate source_path `{}`", p.source_path)));
            }
            if p.source_prompt.is_empty() || p.target_prompt.is_empty() {
                return Err(Error::Manifest(format!("empty prompt in record for `{}`", p.source_path)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.check()?;
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            domain_tag: self.domain_tag,
            created_seed: self.created_seed,
            count: self.pairs.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p).expect("pair serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Manifest("empty file".into()))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| Error::Manifest(format!("line 1: bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut pairs = Vec::with_capacity(header.count);
        for (i, line) in lines {
            let p: PseudoPair = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: malformed record: {e}", i + 1)))?;
            pairs.push(p);
        }
        if pairs.len() != header.count {
            return Err(Error::Manifest(format!(
                "header declares {} records, found {}",
                header.count,
                pairs.len()
            )));
        }
        let m = Self {
            pairs,
            domain_tag: header.domain_tag,
            created_seed: header.created_seed,
        };
        m.check()?;
        Ok(m)
    }

    /// Resolves a stored path against the manifest's directory.
    pub fn resolve(manifest_path: &Path, stored: &str) -> PathBuf {
        let p = Path::new(stored);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

/// Stores `path` relative to `base` when it lies inside it.
pub fn relative_to(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    match p.strip_prefix(&b) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => p.to_string_lossy().into_owned(),
    }
}

/// Validates and writes atomically.
pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    write_atomic(path, m.to_jsonl()?.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).at(path)?;
    DatasetManifest::from_jsonl(&text).map_err(|e| match e {
        Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Endless stream of batches: each epoch is a seeded permutation of the
/// pairs, cut into `batch_size` chunks with a final short chunk.
pub struct BatchStream<'a> {
    manifest: &'a DatasetManifest,
    plan: BatchPlan,
    next: u64,
}

impl<'a> BatchStream<'a> {
    /// Starts at batch number `start` (used when resuming).
    pub fn starting_at(manifest: &'a DatasetManifest, batch_size: usize, seed: u64, start: u64) -> Self {
        Self {
            manifest,
            plan: BatchPlan::new(manifest.pairs.len(), batch_size, seed),
            next: start,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.plan.batches_per_epoch()
    }
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Vec<&'a PseudoPair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.manifest.pairs.is_empty() {
            return None;
        }
        let idx = self.plan.batch_at(self.next);
        self.next += 1;
        Some(idx.into_iter().map(|i| &self.manifest.pairs[i]).collect())
    }
}

pub fn iterate_batches(manifest: &DatasetManifest, batch_size: usize, shuffle_seed: u64) -> BatchStream<'_> {
    BatchStream::starting_at(manifest, batch_size, shuffle_seed, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pair(i: usize) -> PseudoPair {
        PseudoPair {
            source_path: format!("src/{i}.png"),
            pseudo_path: format!("pseudo/{i}.png"),
            source_prompt: "a photo".into(),
            target_prompt: "a painting".into(),
            generator_id: "stub".into(),
            seed: 7,
        }
    }

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            pairs: (0..n).map(pair).collect(),
            domain_tag: DomainTag::Paired,
            created_seed: 7,
        }
    }

    #[test]
    fn round_trip() {
        let m = manifest(3);
        assert_eq!(DatasetManifest::from_jsonl(&m.to_jsonl().unwrap()).unwrap(), m);
    }

    #[test]
    fn rejects_empty_paired_and_duplicates() {
        assert!(manifest(0).to_jsonl().is_err());
        let mut m = manifest(2);
        m.pairs[1].source_path = m.pairs[0].source_path.clone();
        let e = m.to_jsonl().unwrap_err().to_string();
        assert!(e.contains("src/0.png"), "{e}");
    }

    #[test]
    fn malformed_record() {
        let text = manifest(1).to_jsonl().unwrap().replace("\"seed\":7}", "\"seed\":\"x\"}");
        assert!(DatasetManifest::from_jsonl(&text).is_err());
    }

    #[test]
    fn batch_sizes() {
        let m = manifest(5);
        let sizes: Vec<usize> = iterate_batches(&m, 2, 1).take(3).map(|b| b.len()).collect();
        assert_eq!(sizes, [2, 2, 1]);
    }
}
