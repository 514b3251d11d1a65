//! Offline pseudo-pair distillation.
//!
//! Every source image is sent through a frozen text-guided stylizer with the
//! target prompt. Results land in `<out>/pseudo/<stem>.png`, the pairs in
//! `<out>/manifest.jsonl`, and items that could not be produced in
//! `<out>/manifest.skips.jsonl`.
//!
//! The remote wire format is one JSON POST per item:
//! request `{"image": <base64 PNG>, "prompt": "...", "seed": 42}`,
//! response `{"image": <base64 PNG>}` with the same height and width.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use stydeco_core::config::{ClientKind, DistillConfig, ExperimentConfig};
use stydeco_core::stub::{stub_stylize, STUB_GENERATOR_ID};
use stydeco_core::ImageTensor;

use crate::error::{Error, Result};
use crate::fsutil::{file_stem, list_images, write_atomic};
use crate::imageio::{decode_image, encode_png, load_image, save_image};
use crate::manifest::{relative_to, write_manifest, DatasetManifest, DomainTag, PseudoPair};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SKIPS_FILE: &str = "manifest.skips.jsonl";
pub const PSEUDO_DIR: &str = "pseudo";

/// A frozen image-to-image stylizer. Failures are final: any retrying
/// happens inside the implementation.
pub trait FrozenGenerator: Sync {
    fn id(&self) -> String;
    fn stylize(&self, image: &ImageTensor, prompt: &str, seed: u64) -> std::result::Result<ImageTensor, String>;
}

/// The deterministic procedural stand-in; never touches the network.
#[derive(Clone, Debug, Default)]
pub struct StubClient;

impl FrozenGenerator for StubClient {
    fn id(&self) -> String {
        STUB_GENERATOR_ID.to_string()
    }

    fn stylize(&self, image: &ImageTensor, prompt: &str, seed: u64) -> std::result::Result<ImageTensor, String> {
        Ok(stub_stylize(image, prompt, seed))
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    image: String,
    prompt: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct RemoteResponse {
    image: String,
}

enum Attempt {
    Retry(String),
    Fail(String),
}

/// HTTP client for a stylizer service speaking the JSON protocol above.
pub struct RemoteClient {
    agent: ureq::Agent,
    endpoint: String,
    generator_id: String,
    max_attempts: usize,
    backoff: Duration,
}

impl RemoteClient {
    pub fn new(endpoint: &str, cfg: &DistillConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            generator_id: cfg.generator_id.clone().unwrap_or_else(|| format!("remote:{endpoint}")),
            max_attempts: cfg.max_attempts.max(1),
            backoff: Duration::from_millis(cfg.backoff_ms),
        }
    }

    fn attempt(&self, body: &RemoteRequest, h: usize, w: usize) -> std::result::Result<ImageTensor, Attempt> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| Attempt::Retry(format!("transport error: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fail(format!("HTTP {status}")));
        }
        let parsed: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fail(format!("malformed response: {e}")))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(parsed.image.as_bytes())
            .map_err(|e| Attempt::Fail(format!("malformed response image: {e}")))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Attempt::Fail(format!("undecodable response image: {e}")))?;
        if img.height() as usize != h || img.width() as usize != w {
            return Err(Attempt::Fail(format!(
                "response is {}x{}, expected {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        Ok(crate::imageio::rgb_to_tensor(&img.to_rgb8()))
    }
}

impl FrozenGenerator for RemoteClient {
    fn id(&self) -> String {
        self.generator_id.clone()
    }

    fn stylize(&self, image: &ImageTensor, prompt: &str, seed: u64) -> std::result::Result<ImageTensor, String> {
        let body = RemoteRequest {
            image: base64::engine::general_purpose::STANDARD.encode(encode_png(image)),
            prompt,
            seed,
        };
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.attempt(&body, image.height(), image.width()) {
                Ok(img) => return Ok(img),
                Err(Attempt::Fail(m)) => return Err(m),
                Err(Attempt::Retry(m)) => {
                    if attempt < self.max_attempts {
                        let wait = self.backoff * (1u32 << (attempt - 1).min(16));
                        eprintln!(
                            "distill: attempt {attempt}/{} failed ({m}); retrying in {} ms",
                            self.max_attempts,
                            wait.as_millis()
                        );
                        std::thread::sleep(wait);
                    }
                    last = m;
                }
            }
        }
        Err(format!("gave up after {} attempts: {last}", self.max_attempts))
    }
}

/// Builds the client named by the config.
pub fn client_from_config(cfg: &DistillConfig) -> Result<Box<dyn FrozenGenerator>> {
    Ok(match cfg.client {
        ClientKind::Stub => Box::new(StubClient),
        ClientKind::Remote => {
            let endpoint = cfg
                .endpoint
                .as_deref()
                .ok_or_else(|| Error::Config("distill.endpoint is required for the remote client".into()))?;
            Box::new(RemoteClient::new(endpoint, cfg))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub source_path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub manifest: PathBuf,
    pub pairs: usize,
    pub skipped: usize,
    pub source_count: usize,
}

fn produce(
    client: &dyn FrozenGenerator,
    src: &Path,
    out_dir: &Path,
    cfg: &ExperimentConfig,
) -> std::result::Result<PseudoPair, String> {
    let img = load_image(src, cfg.image_size).map_err(|e| e.to_string())?;
    let prompt = &cfg.prompts.target_prompt;
    let styled = client.stylize(&img, prompt, cfg.seed)?;
    let pseudo = out_dir.join(PSEUDO_DIR).join(format!("{}.png", file_stem(src)));
    save_image(&styled, &pseudo).map_err(|e| e.to_string())?;
    Ok(PseudoPair {
        source_path: relative_to(src, out_dir),
        pseudo_path: relative_to(&pseudo, out_dir),
        source_prompt: cfg.prompts.source_prompt.clone(),
        target_prompt: prompt.clone(),
        generator_id: client.id(),
        seed: cfg.seed,
    })
}

/// Distills every image in `source_dir` into `out_dir`. Fails if there are
/// no source images or if every item fails.
pub fn distill(
    client: &dyn FrozenGenerator,
    source_dir: &Path,
    out_dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<DistillSummary> {
    let sources = list_images(source_dir)?;
    if sources.is_empty() {
        return Err(Error::Distill(format!("no images in {}", source_dir.display())));
    }
    let mut stems = std::collections::BTreeMap::new();
    for s in &sources {
        if let Some(prev) = stems.insert(file_stem(s), s) {
            return Err(Error::Distill(format!(
                "{} and {} would write the same pseudo image",
                prev.display(),
                s.display()
            )));
        }
    }

    let next = AtomicUsize::new(0);
    let workers = cfg.distill.concurrency.clamp(1, sources.len());
    let mut outcomes: Vec<(usize, std::result::Result<PseudoPair, String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(src) = sources.get(i) else { break };
                        done.push((i, produce(client, src, out_dir, cfg)));
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("distill worker panicked"))
            .collect()
    });
    outcomes.sort_by_key(|(i, _)| *i);

    let mut pairs = Vec::new();
    let mut skips = Vec::new();
    for (i, outcome) in outcomes {
        match outcome {
            Ok(p) => pairs.push(p),
            Err(reason) => {
                eprintln!("distill: skipping {}: {reason}", sources[i].display());
                skips.push(SkipRecord {
                    source_path: relative_to(&sources[i], out_dir),
                    reason,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Distill(format!(
            "all {} items failed; first error: {}",
            skips.len(),
            skips[0].reason
        )));
    }

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let manifest = DatasetManifest {
        pairs,
        domain_tag: DomainTag::Paired,
        created_seed: cfg.seed,
    };
    write_manifest(&manifest, &manifest_path)?;
    let mut skip_text = String::new();
    for s in &skips {
        skip_text.push_str(&serde_json::to_string(s).expect("skip serializes"));
        skip_text.push('\n');
    }
    write_atomic(&out_dir.join(SKIPS_FILE), skip_text.as_bytes())?;

    Ok(DistillSummary {
        manifest: manifest_path,
        pairs: manifest.pairs.len(),
        skipped: skips.len(),
        source_count: sources.len(),
    })
}

/// Loads and validates the source/pseudo images of one pair at `size`.
pub fn load_pair(manifest_path: &Path, pair: &PseudoPair, size: usize) -> Result<(ImageTensor, ImageTensor)> {
    let src = load_image(&DatasetManifest::resolve(manifest_path, &pair.source_path), size)?;
    let pseudo = load_image(&DatasetManifest::resolve(manifest_path, &pair.pseudo_path), size)?;
    Ok((src, pseudo))
}

/// Decodes a base64 PNG payload as used by the wire protocol.
pub fn decode_wire_image(b64: &str, size: usize) -> Result<ImageTensor> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.as_bytes())
        .map_err(|e| Error::Distill(format!("bad base64: {e}")))?;
    decode_image(&bytes, size, Path::new("<wire>"))
}
