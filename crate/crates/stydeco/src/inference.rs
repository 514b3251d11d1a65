//! Stylization and de-stylization with a trained checkpoint.
//!
//! Stylize conditions the translator on the target-domain embedding `c_t`;
//! destylize on the source-domain embedding `c_s`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stydeco_core::config::ExperimentConfig;
use stydeco_core::text::{ConditioningEmbedding, TextDomain};
use stydeco_core::tokenizer::tokenize;
use stydeco_core::train::Models;
use stydeco_core::ImageTensor;

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::fsutil::{file_stem, is_image_path, list_images};
use crate::imageio::{load_image, save_image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Stylize,
    Destylize,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Stylize => "stylize",
            Direction::Destylize => "destylize",
        }
    }
}

/// A loaded model ready to translate images.
pub struct Translator {
    pub config: ExperimentConfig,
    pub models: Models,
    c_s: ConditioningEmbedding,
    c_t: ConditioningEmbedding,
}

impl Translator {
    pub fn new(config: ExperimentConfig, models: Models) -> Result<Self> {
        let max = config.text_encoder.max_tokens;
        let c_s = models
            .text
            .encode_domain(&tokenize(&config.prompts.source_prompt, max), TextDomain::Source)?;
        let c_t = models
            .text
            .encode_domain(&tokenize(&config.prompts.target_prompt, max), TextDomain::Target)?;
        Ok(Self {
            config,
            models,
            c_s,
            c_t,
        })
    }

    /// Loads a checkpoint directory (or a root with `latest.json`).
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let ck = load_checkpoint(checkpoint, None)?;
        Self::new(ck.config, ck.models)
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn translate(&self, img: &ImageTensor, dir: Direction) -> Result<ImageTensor> {
        let c = match dir {
            Direction::Stylize => &self.c_t,
            Direction::Destylize => &self.c_s,
        };
        Ok(self.models.generator.translate(img, c)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub direction: Direction,
    pub outputs: Vec<PathBuf>,
}

/// Translates one file (`output` is a file) or every image in a directory
/// (`output` is a directory; names are `<stem>.png`).
pub fn run_inference(t: &Translator, input: &Path, output: &Path, dir: Direction) -> Result<InferenceSummary> {
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(Error::Invalid(format!("no images in {}", input.display())));
        }
        files
            .into_iter()
            .map(|f| {
                let out = output.join(format!("{}.png", file_stem(&f)));
                (f, out)
            })
            .collect()
    } else if input.is_file() && is_image_path(input) {
        vec![(input.to_path_buf(), output.to_path_buf())]
    } else {
        return Err(Error::Invalid(format!("{} is not an image or directory", input.display())));
    };
    let mut outputs = Vec::with_capacity(jobs.len());
    for (src, dst) in jobs {
        let img = load_image(&src, t.image_size())?;
        save_image(&t.translate(&img, dir)?, &dst)?;
        outputs.push(dst);
    }
    Ok(InferenceSummary { direction: dir, outputs })
}
