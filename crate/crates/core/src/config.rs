//! Experiment configuration: defaults, serde shape and validation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::generator::GeneratorConfig;
use crate::optim::AdamWConfig;
use crate::text::TextEncoderConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Generator adapters and both text adapter sets train together.
    #[default]
    Joint,
    /// Generator adapters first, then the text adapters.
    TwoStage,
    /// No adapters; the generator base is fine-tuned directly.
    NoLora,
}

impl TrainingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Joint => "joint",
            TrainingMode::TwoStage => "two_stage",
            TrainingMode::NoLora => "no_lora",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(TrainingMode::Joint),
            "two_stage" => Some(TrainingMode::TwoStage),
            "no_lora" => Some(TrainingMode::NoLora),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainPrompts {
    pub source_prompt: String,
    pub target_prompt: String,
    /// Extra phrasings of the source prompt used by the separation term.
    pub source_paraphrases: Vec<String>,
    pub target_paraphrases: Vec<String>,
}

impl Default for DomainPrompts {
    fn default() -> Self {
        Self {
            source_prompt: "a natural photograph".into(),
            target_prompt: "a painting in the style of Van Gogh".into(),
            source_paraphrases: Vec::new(),
            target_paraphrases: Vec::new(),
        }
    }
}

impl DomainPrompts {
    /// Main prompt followed by its paraphrases.
    pub fn source_family(&self) -> Vec<&str> {
        core::iter::once(self.source_prompt.as_str())
            .chain(self.source_paraphrases.iter().map(String::as_str))
            .collect()
    }

    pub fn target_family(&self) -> Vec<&str> {
        core::iter::once(self.target_prompt.as_str())
            .chain(self.target_paraphrases.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub separation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 1.0,
            separation: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub source_dir: String,
    pub style_dir: String,
    pub manifest: String,
    pub checkpoints: String,
    pub outputs: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            source_dir: "data/source".into(),
            style_dir: "data/style".into(),
            manifest: "data/manifest.jsonl".into(),
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    #[default]
    Stub,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub client: ClientKind,
    pub endpoint: Option<String>,
    /// Recorded in every pseudo-pair; defaults to the client's own id.
    pub generator_id: Option<String>,
    pub concurrency: usize,
    /// Total attempts per item, including the first.
    pub max_attempts: usize,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            client: ClientKind::Stub,
            endpoint: None,
            generator_id: None,
            concurrency: 4,
            max_attempts: 3,
            backoff_ms: 200,
            timeout_ms: 60_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub prompts: DomainPrompts,
    pub image_size: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub separation_temperature: f64,
    pub training_mode: TrainingMode,
    /// Fraction of steps spent in the first (generator) stage of `two_stage`.
    pub two_stage_split: f64,
    pub lora: LoraConfig,
    /// Rounds matmul/conv outputs to f32 during training.
    pub mixed_precision: bool,
    pub checkpoint_every: usize,
    /// Source images (in manifest order) used for the post-training
    /// validation cycle loss.
    pub validation_images: usize,
    pub perceptual_seed: u64,
    pub metrics_seed: u64,
    pub text_encoder: TextEncoderConfig,
    pub generator: GeneratorConfig,
    pub distill: DistillConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            prompts: DomainPrompts::default(),
            image_size: 256,
            train_steps: 400,
            batch_size: 2,
            grad_accum_steps: 1,
            lr: 1e-5,
            weight_decay: 1e-2,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 42,
            loss_weights: LossWeights::default(),
            separation_temperature: 0.1,
            training_mode: TrainingMode::Joint,
            two_stage_split: 0.5,
            lora: LoraConfig::default(),
            mixed_precision: false,
            checkpoint_every: 100,
            validation_images: 4,
            perceptual_seed: 0,
            metrics_seed: 0,
            text_encoder: TextEncoderConfig::default(),
            generator: GeneratorConfig::default(),
            distill: DistillConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn fields(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.field.as_str()).collect()
    }

    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.to_string(),
            message: message.into(),
        });
    }
}

impl core::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Lists every violated invariant; an empty report means valid.
    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        let max_tokens = self.text_encoder.max_tokens;
        let prompt_checks = [
            ("prompts.source_prompt", &self.prompts.source_prompt),
            ("prompts.target_prompt", &self.prompts.target_prompt),
        ];
        for (field, p) in prompt_checks {
            if p.trim().is_empty() {
                r.push(field, "must be non-empty");
            } else if p.len() + 2 > max_tokens {
                r.push(field, alloc::format!("{} tokens exceeds max_tokens {max_tokens}", p.len() + 2));
            }
        }
        for (i, p) in self.prompts.source_paraphrases.iter().enumerate() {
            if p.trim().is_empty() {
                r.push(&alloc::format!("prompts.source_paraphrases[{i}]"), "must be non-empty");
            }
        }
        for (i, p) in self.prompts.target_paraphrases.iter().enumerate() {
            if p.trim().is_empty() {
                r.push(&alloc::format!("prompts.target_paraphrases[{i}]"), "must be non-empty");
            }
        }
        let counts = [
            ("image_size", self.image_size),
            ("train_steps", self.train_steps),
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("lora.rank", self.lora.rank),
            ("checkpoint_every", self.checkpoint_every),
            ("distill.concurrency", self.distill.concurrency),
            ("distill.max_attempts", self.distill.max_attempts),
        ];
        for (field, v) in counts {
            if v < 1 {
                r.push(field, "must be at least 1");
            }
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) {
            r.push("lr", alloc::format!("must be > 0, got {}", self.lr));
        }
        if !positive(self.grad_clip_norm) {
            r.push("grad_clip_norm", alloc::format!("must be > 0, got {}", self.grad_clip_norm));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            r.push("weight_decay", "must be finite and >= 0");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            r.push("adam_betas", "both betas must lie in [0, 1)");
        }
        if !positive(self.adam_eps) {
            r.push("adam_eps", "must be > 0");
        }
        if !positive(self.separation_temperature) {
            r.push("separation_temperature", "must be > 0");
        }
        let w = self.loss_weights;
        for (field, v) in [
            ("loss_weights.l1", w.l1),
            ("loss_weights.perceptual", w.perceptual),
            ("loss_weights.separation", w.separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                r.push(field, "must be finite and >= 0");
            }
        }
        if !positive(self.lora.alpha) {
            r.push("lora.alpha", "must be > 0");
        }
        if !(self.two_stage_split > 0.0 && self.two_stage_split < 1.0) {
            r.push("two_stage_split", "must lie strictly between 0 and 1");
        }
        let factor = self.generator.downsample_factor();
        if self.image_size >= 1 && !self.image_size.is_multiple_of(factor) {
            r.push(
                "image_size",
                alloc::format!("{} is not divisible by the VAE downsample factor {factor}", self.image_size),
            );
        }
        if self.generator.d_cond != self.text_encoder.d_model {
            r.push(
                "generator.d_cond",
                alloc::format!(
                    "must equal text_encoder.d_model ({} != {})",
                    self.generator.d_cond, self.text_encoder.d_model
                ),
            );
        }
        if let Err(e) = self.text_encoder.validate() {
            r.push("text_encoder", e.to_string());
        }
        if let Err(e) = self.generator.validate() {
            r.push("generator", e.to_string());
        }
        if self.distill.client == ClientKind::Remote && self.distill.endpoint.is_none() {
            r.push("distill.endpoint", "required for the remote client");
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_valid() {
        let c = ExperimentConfig::default();
        assert!(c.validate().is_valid(), "{}", c.validate());
        assert_eq!(c.lr, 1e-5);
        assert_eq!(c.weight_decay, 1e-2);
        assert_eq!(c.adam_betas, (0.9, 0.999));
        assert_eq!(c.grad_clip_norm, 1.0);
        assert_eq!(c.seed, 42);
        assert_eq!(c.image_size, 256);
    }

    #[test]
    fn zero_lr() {
        let c = ExperimentConfig { lr: 0.0, ..Default::default() };
        assert_eq!(c.validate().fields(), ["lr"]);
    }

    #[test]
    fn two_violations() {
        let c = ExperimentConfig {
            batch_size: 0,
            grad_clip_norm: -1.0,
            ..Default::default()
        };
        let r = c.validate();
        assert_eq!(r.violations.len(), 2);
        assert!(r.fields().contains(&"batch_size"));
        assert!(r.fields().contains(&"grad_clip_norm"));
    }

    #[test]
    fn indivisible_size() {
        let c = ExperimentConfig { image_size: 100, ..Default::default() };
        assert_eq!(c.validate().fields(), ["image_size"]);
    }

    #[test]
    fn long_prompt() {
        let mut c = ExperimentConfig::default();
        c.prompts.target_prompt = "x".repeat(80);
        assert_eq!(c.validate().fields(), ["prompts.target_prompt"]);
    }

    #[test]
    fn mode_strings() {
        for m in [TrainingMode::Joint, TrainingMode::TwoStage, TrainingMode::NoLora] {
            assert_eq!(TrainingMode::parse(m.as_str()), Some(m));
        }
        assert_eq!(TrainingMode::parse("both"), None);
    }
}
