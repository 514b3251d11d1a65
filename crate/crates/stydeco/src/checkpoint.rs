//! Training checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! step-000100/
//!   config.json            full experiment config
//!   state.json             step, batches consumed, training mode
//!   text_base.bin          one little-endian f64 blob per parameter group
//!   source_adapters.bin
//!   target_adapters.bin
//!   generator_base.bin
//!   generator_adapters.bin
//!   optimizer.bin          AdamW first and second moments
//!   index.json             tensor names/shapes/offsets and SHA-256 per blob
//! ```
//!
//! Every file is written atomically and `index.json` last, so a directory
//! without an index is an interrupted write and is rejected on load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stydeco_core::config::ExperimentConfig;
use stydeco_core::optim::{AdamSlot, AdamW};
use stydeco_core::params::{ParamGroup, ParamKey};
use stydeco_core::train::{Models, TrainState};
use stydeco_core::{Tensor, TrainingMode};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "stydeco-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const LATEST_FILE: &str = "latest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub step: u64,
    /// Offset of `m`; `v` follows immediately.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub architecture_hash: String,
    pub groups: BTreeMap<String, BlobEntry>,
    pub optimizer: OptimizerEntry,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub file: String,
    pub sha256: String,
    pub slots: Vec<SlotEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateFile {
    pub step: u64,
    pub batches_consumed: u64,
    pub mode: TrainingMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Latest {
    step: u64,
    dir: String,
}

/// The config fields that determine tensor shapes and which groups exist.
#[derive(Serialize)]
struct Architecture<'a> {
    training_mode: TrainingMode,
    lora_rank: usize,
    lora_alpha: f64,
    text_encoder: &'a stydeco_core::text::TextEncoderConfig,
    generator: &'a stydeco_core::generator::GeneratorConfig,
    perceptual_seed: u64,
}

fn architecture_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(Architecture {
        training_mode: cfg.training_mode,
        lora_rank: cfg.lora.rank,
        lora_alpha: cfg.lora.alpha,
        text_encoder: &cfg.text_encoder,
        generator: &cfg.generator,
        perceptual_seed: cfg.perceptual_seed,
    })
    .expect("architecture serializes")
}

/// SHA-256 of the architecture-defining config fields.
pub fn architecture_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(architecture_value(cfg).to_string().as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_group(models: &Models, group: ParamGroup) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in models.group_tensors(group) {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    (bytes, entries)
}

/// Content hash of one parameter group (names, shapes and values).
pub fn group_hash(models: &Models, group: ParamGroup) -> String {
    let mut h = Sha256::new();
    for (name, t) in models.group_tensors(group) {
        h.update(name.as_bytes());
        h.update([0]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn group_from_str(s: &str) -> Option<ParamGroup> {
    ParamGroup::ALL.into_iter().find(|g| g.as_str() == s)
}

pub fn step_dir_name(step: u64) -> String {
    format!("step-{step:06}")
}

/// Writes a checkpoint for `state.step` into `root/step-NNNNNN/` and points
/// `root/latest.json` at it. Returns the checkpoint directory.
pub fn save_checkpoint(root: &Path, models: &Models, state: &TrainState, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = root.join(step_dir_name(state.step));
    write_atomic(&dir.join("config.json"), crate::config_io::config_to_string(cfg).as_bytes())?;
    let st = StateFile {
        step: state.step,
        batches_consumed: state.batches_consumed,
        mode: state.mode,
    };
    write_atomic(&dir.join("state.json"), serde_json::to_string_pretty(&st).expect("state").as_bytes())?;

    let mut groups = BTreeMap::new();
    for g in ParamGroup::ALL {
        let (bytes, tensors) = encode_group(models, g);
        let file = format!("{}.bin", g.as_str());
        write_atomic(&dir.join(&file), &bytes)?;
        groups.insert(
            g.as_str().to_string(),
            BlobEntry {
                file,
                sha256: sha256_hex(&bytes),
                tensors,
            },
        );
    }

    let mut opt_bytes = Vec::new();
    let mut slots = Vec::new();
    let mut offset = 0;
    for (key, slot) in state.optimizer.slots() {
        slots.push(SlotEntry {
            group: key.group.as_str().to_string(),
            name: key.name.clone(),
            shape: slot.m.shape().to_vec(),
            step: slot.step,
            offset,
        });
        for v in slot.m.data().iter().chain(slot.v.data()) {
            opt_bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += 2 * slot.m.len();
    }
    write_atomic(&dir.join("optimizer.bin"), &opt_bytes)?;

    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: state.step,
        architecture_hash: architecture_hash(cfg),
        groups,
        optimizer: OptimizerEntry {
            file: "optimizer.bin".into(),
            sha256: sha256_hex(&opt_bytes),
            slots,
        },
    };
    write_atomic(&dir.join(INDEX_FILE), serde_json::to_string_pretty(&index).expect("index").as_bytes())?;
    let latest = Latest {
        step: state.step,
        dir: step_dir_name(state.step),
    };
    write_atomic(&root.join(LATEST_FILE), serde_json::to_string(&latest).expect("latest").as_bytes())?;
    Ok(dir)
}

/// Accepts either a checkpoint directory or a root holding `latest.json`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(INDEX_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let latest_path = path.join(LATEST_FILE);
    if latest_path.is_file() {
        let text = std::fs::read_to_string(&latest_path).at(&latest_path)?;
        let latest: Latest = serde_json::from_str(&text).at(&latest_path)?;
        let dir = path.join(latest.dir);
        if dir.join(INDEX_FILE).is_file() {
            return Ok(dir);
        }
    }
    Err(Error::Checkpoint {
        path: path.to_path_buf(),
        message: "no complete checkpoint (missing index.json)".into(),
    })
}

/// Whether `root` holds a resumable checkpoint.
pub fn has_checkpoint(root: &Path) -> bool {
    resolve_checkpoint(root).is_ok()
}

pub struct LoadedCheckpoint {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub models: Models,
    pub state: TrainState,
}

fn read_blob(dir: &Path, file: &str, sha: &str) -> Result<Vec<f64>> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).at(&path)?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::Checkpoint {
            path,
            message: "SHA-256 mismatch".into(),
        });
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint {
            path,
            message: "blob length is not a multiple of 8".into(),
        });
    }
    Ok(decode_f64s(&bytes))
}

fn slice(values: &[f64], offset: usize, shape: &[usize], dir: &Path, what: &str) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = values.get(offset..offset + n).ok_or_else(|| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: format!("`{what}` lies outside its blob"),
    })?;
    Ok(Tensor::new(shape, data.to_vec()))
}

/// Loads the checkpoint at `path` (see [`resolve_checkpoint`]).
///
/// With `current = Some(cfg)`, the architecture-defining fields must match
/// the checkpoint's config, otherwise [`Error::ConfigMismatch`] is returned.
pub fn load_checkpoint(path: &Path, current: Option<&ExperimentConfig>) -> Result<LoadedCheckpoint> {
    let dir = resolve_checkpoint(path)?;
    let corrupt = |message: String| Error::Checkpoint {
        path: dir.clone(),
        message,
    };
    let index_path = dir.join(INDEX_FILE);
    let index: CheckpointIndex =
        serde_json::from_str(&std::fs::read_to_string(&index_path).at(&index_path)?).at(&index_path)?;
    if index.format != CHECKPOINT_FORMAT || index.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported format {} v{}", index.format, index.version)));
    }
    let saved_cfg = crate::config_io::load_config(&dir.join("config.json"))?.config;
    if architecture_hash(&saved_cfg) != index.architecture_hash {
        return Err(corrupt("config.json does not match the index".into()));
    }
    if let Some(cur) = current {
        let (a, b) = (architecture_value(&saved_cfg), architecture_value(cur));
        if a != b {
            let fields: Vec<String> = a
                .as_object()
                .expect("object")
                .iter()
                .filter(|(k, v)| b.get(k.as_str()) != Some(v))
                .map(|(k, _)| k.clone())
                .collect();
            return Err(Error::ConfigMismatch {
                fields: fields.join(", "),
                checkpoint_hash: index.architecture_hash,
                current_hash: architecture_hash(cur),
            });
        }
    }
    let state_path = dir.join("state.json");
    let st: StateFile = serde_json::from_str(&std::fs::read_to_string(&state_path).at(&state_path)?).at(&state_path)?;
    if st.step != index.step {
        return Err(corrupt("state.json and index.json disagree on the step".into()));
    }

    let mut models = Models::init(&saved_cfg)?;
    for g in ParamGroup::ALL {
        let entry = index
            .groups
            .get(g.as_str())
            .ok_or_else(|| corrupt(format!("group `{}` missing", g.as_str())))?;
        let values = read_blob(&dir, &entry.file, &entry.sha256)?;
        let expected: Vec<(String, Vec<usize>)> = models
            .group_tensors(g)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let found: Vec<(String, Vec<usize>)> = entry.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != found {
            return Err(corrupt(format!("tensor layout of `{}` does not match the config", g.as_str())));
        }
        let total: usize = entry.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if total != values.len() {
            return Err(corrupt(format!("`{}` blob has the wrong length", entry.file)));
        }
        for t in &entry.tensors {
            let tensor = slice(&values, t.offset, &t.shape, &dir, &t.name)?;
            *models
                .tensor_mut(&ParamKey::new(g, t.name.clone()))
                .ok_or_else(|| corrupt(format!("unknown tensor `{}`", t.name)))? = tensor;
        }
    }

    let values = read_blob(&dir, &index.optimizer.file, &index.optimizer.sha256)?;
    let mut optimizer = AdamW::new();
    for s in &index.optimizer.slots {
        let group = group_from_str(&s.group).ok_or_else(|| corrupt(format!("unknown group `{}`", s.group)))?;
        let key = ParamKey::new(group, s.name.clone());
        let shape_ok = models.tensor(&key).is_some_and(|t| t.shape() == s.shape.as_slice());
        if !shape_ok {
            return Err(corrupt(format!("optimizer slot `{key}` does not match a parameter")));
        }
        let n: usize = s.shape.iter().product();
        let m = slice(&values, s.offset, &s.shape, &dir, &s.name)?;
        let v = slice(&values, s.offset + n, &s.shape, &dir, &s.name)?;
        optimizer.insert_slot(key, AdamSlot { m, v, step: s.step });
    }

    Ok(LoadedCheckpoint {
        dir,
        config: saved_cfg,
        models,
        state: TrainState {
            step: st.step,
            optimizer,
            batches_consumed: st.batches_consumed,
            mode: st.mode,
        },
    })
}
