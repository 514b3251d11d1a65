//! Toy transformer text encoder with two domain adapter sets.
//!
//! The frozen base maps a [`TokenSequence`] to a `[max_tokens, d_model]`
//! conditioning matrix. The source and target encoders are the same network
//! with the corresponding [`AdapterSet`] folded into every attention and
//! feed-forward projection.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lora::{AdapterDomain, AdapterRef, AdapterSet};
use crate::nn::Binding;
use crate::params::{
    check_param_map, init_param_map, LayerKind, LayerSpec, ParamGroup, ParamMap, Session,
};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, DEFAULT_MAX_TOKENS, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub max_tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
        }
    }
}

impl TextEncoderConfig {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let d = self.d_model;
        let mut v = Vec::new();
        v.push(LayerSpec::new(
            "tok_emb",
            LayerKind::Embedding {
                rows: VOCAB_SIZE,
                d,
            },
            false,
        ));
        v.push(LayerSpec::new(
            "pos_emb",
            LayerKind::Embedding {
                rows: self.max_tokens,
                d,
            },
            false,
        ));
        for i in 0..self.layers {
            let p = format!("blocks.{i}");
            v.push(LayerSpec::new(format!("{p}.ln1"), LayerKind::LayerNorm { d }, false));
            for proj in ["q", "k", "v", "out"] {
                v.push(LayerSpec::new(
                    format!("{p}.attn.{proj}"),
                    LayerKind::Linear { d_in: d, d_out: d },
                    true,
                ));
            }
            v.push(LayerSpec::new(format!("{p}.ln2"), LayerKind::LayerNorm { d }, false));
            let hidden = d * self.ffn_mult;
            v.push(LayerSpec::new(
                format!("{p}.ffn.fc1"),
                LayerKind::Linear {
                    d_in: d,
                    d_out: hidden,
                },
                true,
            ));
            v.push(LayerSpec::new(
                format!("{p}.ffn.fc2"),
                LayerKind::Linear {
                    d_in: hidden,
                    d_out: d,
                },
                true,
            ));
        }
        v.push(LayerSpec::new("ln_final", LayerKind::LayerNorm { d }, false));
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 2 || self.d_model == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidArgument(
                "text encoder dimensions must be positive (max_tokens >= 2)".into(),
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "text encoder heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextDomain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingDomain {
    Base,
    Source,
    Target,
}

impl From<TextDomain> for EmbeddingDomain {
    fn from(d: TextDomain) -> Self {
        match d {
            TextDomain::Source => EmbeddingDomain::Source,
            TextDomain::Target => EmbeddingDomain::Target,
        }
    }
}

/// Per-token encoder output, `values: [max_tokens, d_cond]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningEmbedding {
    pub values: Tensor,
    pub mask: Vec<bool>,
    pub domain: EmbeddingDomain,
}

impl ConditioningEmbedding {
    /// Mean over unpadded token positions.
    pub fn pooled(&self) -> Vec<f64> {
        let d = self.values.shape()[1];
        let weights = pooling_weights(&self.mask);
        let mut out = alloc::vec![0.0; d];
        for (t, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let row = &self.values.data()[t * d..(t + 1) * d];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        out
    }
}

pub(crate) fn pooling_weights(mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|m| **m).count().max(1) as f64;
    mask.iter().map(|m| if *m { 1.0 / n } else { 0.0 }).collect()
}

/// Frozen base plus the source and target adapter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderWeights {
    pub config: TextEncoderConfig,
    pub base: ParamMap,
    pub source: AdapterSet,
    pub target: AdapterSet,
}

impl TextEncoderWeights {
    pub fn init(config: TextEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = init_param_map(&config.layer_specs(), crate::rng::derive_seed(seed, "text"), 0.02);
        Ok(Self {
            config,
            base,
            source: AdapterSet::empty(AdapterDomain::Source),
            target: AdapterSet::empty(AdapterDomain::Target),
        })
    }

    /// Base weights with fresh adapters for both domains.
    pub fn init_with_adapters(config: TextEncoderConfig, seed: u64, rank: usize, alpha: f64) -> Result<Self> {
        let mut w = Self::init(config, seed)?;
        w.attach_fresh_adapters(seed, rank, alpha)?;
        Ok(w)
    }

    pub fn attach_fresh_adapters(&mut self, seed: u64, rank: usize, alpha: f64) -> Result<()> {
        let layers = self.config.layer_specs();
        self.source = AdapterSet::for_layers(AdapterDomain::Source, &layers, rank, alpha, seed)?;
        self.target = AdapterSet::for_layers(AdapterDomain::Target, &layers, rank, alpha, seed)?;
        Ok(())
    }

    pub fn adapters(&self, domain: TextDomain) -> &AdapterSet {
        match domain {
            TextDomain::Source => &self.source,
            TextDomain::Target => &self.target,
        }
    }

    pub fn adapters_mut(&mut self, domain: TextDomain) -> &mut AdapterSet {
        match domain {
            TextDomain::Source => &mut self.source,
            TextDomain::Target => &mut self.target,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let layers = self.config.layer_specs();
        check_param_map(&layers, &self.base)?;
        self.source.check_against(&layers)?;
        self.target.check_against(&layers)
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.config.max_tokens || tokens.attention_mask.len() != tokens.len() {
            return Err(crate::error::shape_mismatch(
                "token sequence",
                &[self.config.max_tokens],
                &[tokens.len()],
            ));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::InvalidArgument(format!("token id {bad} out of vocabulary")));
        }
        Ok(())
    }

    /// Adds the encoder forward pass to `s`; returns `[max_tokens, d_model]`.
    pub fn forward(&self, s: &mut Session, tokens: &TokenSequence, domain: Option<TextDomain>) -> Result<Var> {
        self.check_tokens(tokens)?;
        let adapters = domain.map(|d| {
            let set = self.adapters(d);
            AdapterRef {
                set,
                group: set.domain.param_group(),
            }
        });
        let bind = Binding::new(&self.base, ParamGroup::TextBase, adapters);
        let cfg = &self.config;
        let tok = bind.tensor(s, "tok_emb")?;
        let pos = bind.tensor(s, "pos_emb")?;
        let e = s.graph.embedding(tok, &tokens.ids);
        let mut x = s.graph.add(e, pos);
        for i in 0..cfg.layers {
            let p = format!("blocks.{i}");
            let h = bind.layer_norm(s, x, &format!("{p}.ln1"))?;
            let q = bind.linear(s, h, &format!("{p}.attn.q"))?;
            let k = bind.linear(s, h, &format!("{p}.attn.k"))?;
            let v = bind.linear(s, h, &format!("{p}.attn.v"))?;
            let a = s.graph.attention(q, k, v, cfg.heads);
            let a = bind.linear(s, a, &format!("{p}.attn.out"))?;
            x = s.graph.add(x, a);
            let h = bind.layer_norm(s, x, &format!("{p}.ln2"))?;
            let h = bind.linear(s, h, &format!("{p}.ffn.fc1"))?;
            let h = s.graph.gelu(h);
            let h = bind.linear(s, h, &format!("{p}.ffn.fc2"))?;
            x = s.graph.add(x, h);
        }
        bind.layer_norm(s, x, "ln_final")
    }

    fn run(&self, tokens: &TokenSequence, domain: Option<TextDomain>) -> Result<ConditioningEmbedding> {
        let mut s = Session::inference();
        let out = self.forward(&mut s, tokens, domain)?;
        Ok(ConditioningEmbedding {
            values: s.graph.value(out).clone(),
            mask: tokens.attention_mask.clone(),
            domain: domain.map_or(EmbeddingDomain::Base, EmbeddingDomain::from),
        })
    }

    /// `E_base`: the frozen encoder, no adapters.
    pub fn encode_base(&self, tokens: &TokenSequence) -> Result<ConditioningEmbedding> {
        self.run(tokens, None)
    }

    /// `E_s` / `E_t`: the base with one domain's adapters applied.
    pub fn encode_domain(&self, tokens: &TokenSequence, domain: TextDomain) -> Result<ConditioningEmbedding> {
        self.run(tokens, Some(domain))
    }
}
