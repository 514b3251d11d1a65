//! One-step latent translator: a deterministic convolutional autoencoder
//! around a small text-conditioned UNet evaluated at one fixed timestep.
//!
//! `translate(x, c) = decode(unet(encode(x), c))`. Both translation
//! directions share these weights and differ only in the conditioning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_mismatch, Error, Result};
use crate::image::{ImageTensor, LatentTensor};
use crate::lora::{AdapterDomain, AdapterRef, AdapterSet};
use crate::nn::{Binding, CONV1, CONV3, CONV3_DOWN};
use crate::params::{
    check_param_map, init_param_map, param_map_count, LayerKind, LayerSpec, ParamGroup, ParamMap,
    Session,
};
use crate::text::ConditioningEmbedding;
use crate::TrainingMode;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Output channels of each stride-2 encoder stage.
    pub vae_channels: Vec<usize>,
    pub latent_channels: usize,
    pub unet_channels: usize,
    pub unet_heads: usize,
    pub ffn_mult: usize,
    /// Width of the conditioning embeddings consumed by cross-attention.
    pub d_cond: usize,
    pub timestep_dim: usize,
    /// Adds encoder activations into the decoder at matching resolutions.
    pub skip_connections: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vae_channels: vec![32, 64, 128],
            latent_channels: 4,
            unet_channels: 64,
            unet_heads: 4,
            ffn_mult: 4,
            d_cond: 64,
            timestep_dim: 64,
            skip_connections: false,
        }
    }
}

struct UnetBlock {
    name: &'static str,
    c_in: usize,
    c_out: usize,
}

impl GeneratorConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.vae_channels.len()
    }

    fn unet_blocks(&self) -> [UnetBlock; 5] {
        let c = self.unet_channels;
        [
            UnetBlock { name: "down0", c_in: c, c_out: c },
            UnetBlock { name: "down1", c_in: c, c_out: 2 * c },
            UnetBlock { name: "mid", c_in: 2 * c, c_out: 2 * c },
            UnetBlock { name: "up0", c_in: 2 * c, c_out: c },
            UnetBlock { name: "up1", c_in: c, c_out: c },
        ]
    }

    fn decoder_channels(&self, i: usize) -> (usize, usize) {
        let n = self.vae_channels.len();
        let c_in = self.vae_channels[n - 1 - i];
        let c_out = if i + 1 == n {
            IMAGE_CHANNELS
        } else {
            self.vae_channels[n - 2 - i]
        };
        (c_in, c_out)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let conv = |c_in, c_out, kernel| LayerKind::Conv {
            c_in,
            c_out,
            kernel,
        };
        let mut v = Vec::new();
        let mut prev = IMAGE_CHANNELS;
        for (i, &c) in self.vae_channels.iter().enumerate() {
            v.push(LayerSpec::new(format!("vae.enc.{i}"), conv(prev, c, 3), true));
            prev = c;
        }
        v.push(LayerSpec::new("vae.enc.proj", conv(prev, self.latent_channels, 1), true));
        v.push(LayerSpec::new("vae.dec.proj", conv(self.latent_channels, prev, 1), true));
        for i in 0..self.vae_channels.len() {
            let (ci, co) = self.decoder_channels(i);
            v.push(LayerSpec::new(format!("vae.dec.{i}"), conv(ci, co, 3), true));
        }
        let c = self.unet_channels;
        v.push(LayerSpec::new("unet.conv_in", conv(self.latent_channels, c, 3), true));
        v.push(LayerSpec::new(
            "unet.timestep",
            LayerKind::Vector {
                d: self.timestep_dim,
            },
            false,
        ));
        for b in self.unet_blocks() {
            let p = format!("unet.{}", b.name);
            let co = b.c_out;
            let lin = |d_in, d_out| LayerKind::Linear { d_in, d_out };
            v.push(LayerSpec::new(format!("{p}.conv"), conv(b.c_in, co, 3), true));
            v.push(LayerSpec::new(format!("{p}.temb"), lin(self.timestep_dim, co), false));
            v.push(LayerSpec::new(format!("{p}.norm1"), LayerKind::LayerNorm { d: co }, false));
            v.push(LayerSpec::new(format!("{p}.attn.q"), lin(co, co), true));
            v.push(LayerSpec::new(format!("{p}.attn.k"), lin(self.d_cond, co), true));
            v.push(LayerSpec::new(format!("{p}.attn.v"), lin(self.d_cond, co), true));
            v.push(LayerSpec::new(format!("{p}.attn.out"), lin(co, co), true));
            v.push(LayerSpec::new(format!("{p}.norm2"), LayerKind::LayerNorm { d: co }, false));
            v.push(LayerSpec::new(format!("{p}.ffn.fc1"), lin(co, co * self.ffn_mult), true));
            v.push(LayerSpec::new(format!("{p}.ffn.fc2"), lin(co * self.ffn_mult, co), true));
        }
        v.push(LayerSpec::new("unet.conv_out", conv(c, self.latent_channels, 3), true));
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.vae_channels.is_empty() || self.vae_channels.contains(&0) {
            return Err(Error::InvalidArgument("vae_channels must be non-empty and positive".into()));
        }
        if self.latent_channels == 0 || self.unet_channels == 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidArgument("generator widths must be positive".into()));
        }
        if self.d_cond == 0 || self.timestep_dim == 0 {
            return Err(Error::InvalidArgument("d_cond and timestep_dim must be positive".into()));
        }
        if self.unet_heads == 0 || !self.unet_channels.is_multiple_of(self.unet_heads) {
            return Err(Error::InvalidArgument(format!(
                "unet_heads ({}) must divide unet_channels ({})",
                self.unet_heads, self.unet_channels
            )));
        }
        Ok(())
    }
}

/// Frozen base weights plus the generator adapter set.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub config: GeneratorConfig,
    pub base: ParamMap,
    pub adapters: AdapterSet,
}

impl GeneratorWeights {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let base = init_param_map(
            &config.layer_specs(),
            crate::rng::derive_seed(seed, "generator"),
            0.02,
        );
        Ok(Self {
            config,
            base,
            adapters: AdapterSet::empty(AdapterDomain::Generator),
        })
    }

    pub fn init_with_adapters(config: GeneratorConfig, seed: u64, rank: usize, alpha: f64) -> Result<Self> {
        let mut w = Self::init(config, seed)?;
        w.attach_fresh_adapters(seed, rank, alpha)?;
        Ok(w)
    }

    pub fn attach_fresh_adapters(&mut self, seed: u64, rank: usize, alpha: f64) -> Result<()> {
        self.adapters = AdapterSet::for_layers(
            AdapterDomain::Generator,
            &self.config.layer_specs(),
            rank,
            alpha,
            seed,
        )?;
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let layers = self.config.layer_specs();
        check_param_map(&layers, &self.base)?;
        self.adapters.check_against(&layers)
    }

    pub fn base_parameter_count(&self) -> usize {
        param_map_count(&self.base)
    }

    /// Parameters updated by training in `mode`.
    pub fn trainable_parameter_count(&self, mode: TrainingMode) -> usize {
        match mode {
            TrainingMode::Joint | TrainingMode::TwoStage => self.adapters.parameter_count(),
            TrainingMode::NoLora => self.base_parameter_count(),
        }
    }

    fn binding(&self) -> Binding<'_> {
        let adapters = if self.adapters.is_empty() {
            None
        } else {
            Some(AdapterRef::new(&self.adapters))
        };
        Binding::new(&self.base, ParamGroup::GeneratorBase, adapters)
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.downsample_factor();
        if shape.len() != 3 || shape[0] != IMAGE_CHANNELS || !shape[1].is_multiple_of(f) || !shape[2].is_multiple_of(f) || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::InvalidArgument(format!(
                "image shape {shape:?} must be [3, H, W] with H and W positive multiples of {f}"
            )));
        }
        Ok(())
    }

    fn check_cond(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.d_cond {
            return Err(shape_mismatch("conditioning", &[0, self.config.d_cond], shape));
        }
        Ok(())
    }

    /// Encoder pass; returns the latent and the intermediate activations.
    fn encode_vars(&self, s: &mut Session, img: Var) -> Result<(Var, Vec<Var>)> {
        let bind = self.binding();
        let mut x = img;
        let mut acts = Vec::new();
        for i in 0..self.config.vae_channels.len() {
            x = bind.conv(s, x, &format!("vae.enc.{i}"), CONV3_DOWN)?;
            x = s.graph.silu(x);
            acts.push(x);
        }
        let z = bind.conv(s, x, "vae.enc.proj", CONV1)?;
        Ok((z, acts))
    }

    fn decode_vars(&self, s: &mut Session, z: Var, skips: Option<&[Var]>) -> Result<Var> {
        let bind = self.binding();
        let n = self.config.vae_channels.len();
        let x = bind.conv(s, z, "vae.dec.proj", CONV1)?;
        let mut x = s.graph.silu(x);
        for i in 0..n {
            x = s.graph.upsample2x(x);
            x = bind.conv(s, x, &format!("vae.dec.{i}"), CONV3)?;
            if i + 1 == n {
                x = s.graph.tanh(x);
            } else {
                x = s.graph.silu(x);
                if let Some(skips) = skips {
                    x = s.graph.add(x, skips[n - 2 - i]);
                }
            }
        }
        Ok(x)
    }

    fn unet_block(&self, s: &mut Session, bind: &Binding<'_>, x: Var, temb: Var, cond: Var, block: &UnetBlock) -> Result<Var> {
        let p = format!("unet.{}", block.name);
        let h = bind.conv(s, x, &format!("{p}.conv"), CONV3)?;
        let t = bind.linear(s, temb, &format!("{p}.temb"))?;
        let t = s.graph.reshape(t, &[block.c_out]);
        let h = s.graph.add_channel(h, t);
        let h = s.graph.silu(h);
        let shape = s.graph.shape(h).to_vec();
        let hw = shape[1] * shape[2];
        let flat = s.graph.reshape(h, &[block.c_out, hw]);
        let mut tokens = s.graph.transpose(flat);

        let a = bind.layer_norm(s, tokens, &format!("{p}.norm1"))?;
        let q = bind.linear(s, a, &format!("{p}.attn.q"))?;
        let k = bind.linear(s, cond, &format!("{p}.attn.k"))?;
        let v = bind.linear(s, cond, &format!("{p}.attn.v"))?;
        let o = s.graph.attention(q, k, v, self.config.unet_heads);
        let o = bind.linear(s, o, &format!("{p}.attn.out"))?;
        tokens = s.graph.add(tokens, o);

        let f = bind.layer_norm(s, tokens, &format!("{p}.norm2"))?;
        let f = bind.linear(s, f, &format!("{p}.ffn.fc1"))?;
        let f = s.graph.gelu(f);
        let f = bind.linear(s, f, &format!("{p}.ffn.fc2"))?;
        tokens = s.graph.add(tokens, f);

        let back = s.graph.transpose(tokens);
        Ok(s.graph.reshape(back, &shape))
    }

    /// Single conditioned UNet evaluation at the fixed timestep; residual on
    /// the latent.
    fn unet_vars(&self, s: &mut Session, z: Var, cond: Var) -> Result<Var> {
        self.check_cond(s.graph.shape(cond))?;
        let bind = self.binding();
        let temb = bind.tensor(s, "unet.timestep")?;
        let temb = s.graph.reshape(temb, &[1, self.config.timestep_dim]);
        let h = bind.conv(s, z, "unet.conv_in", CONV3)?;
        let [down0, down1, mid, up0, up1] = self.config.unet_blocks();
        let d0 = self.unet_block(s, &bind, h, temb, cond, &down0)?;
        let d1 = self.unet_block(s, &bind, d0, temb, cond, &down1)?;
        let m = self.unet_block(s, &bind, d1, temb, cond, &mid)?;
        let m = s.graph.add(m, d1);
        let u0 = self.unet_block(s, &bind, m, temb, cond, &up0)?;
        let u0 = s.graph.add(u0, d0);
        let u1 = self.unet_block(s, &bind, u0, temb, cond, &up1)?;
        let u1 = s.graph.silu(u1);
        let out = bind.conv(s, u1, "unet.conv_out", CONV3)?;
        Ok(s.graph.add(z, out))
    }

    /// `G(img, cond)` inside a session. `img: [3, H, W]`, `cond: [T, d_cond]`.
    pub fn translate_vars(&self, s: &mut Session, img: Var, cond: Var) -> Result<Var> {
        self.check_image(s.graph.shape(img))?;
        let (z, acts) = self.encode_vars(s, img)?;
        let z = self.unet_vars(s, z, cond)?;
        let skips = self.config.skip_connections.then_some(acts.as_slice());
        self.decode_vars(s, z, skips)
    }

    pub fn vae_encode(&self, img: &ImageTensor) -> Result<LatentTensor> {
        self.check_image(img.tensor().shape())?;
        let mut s = Session::inference();
        let x = s.graph.constant(img.tensor().clone());
        let (z, _) = self.encode_vars(&mut s, x)?;
        LatentTensor::new(s.graph.value(z).clone())
    }

    pub fn vae_decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let zs = z.shape();
        if zs[0] != self.config.latent_channels {
            return Err(shape_mismatch("latent", &[self.config.latent_channels, zs[1], zs[2]], zs));
        }
        let mut s = Session::inference();
        let x = s.graph.constant(z.tensor().clone());
        let out = self.decode_vars(&mut s, x, None)?;
        ImageTensor::new(s.graph.value(out).clone())
    }

    pub fn unet(&self, z: &LatentTensor, c: &ConditioningEmbedding) -> Result<LatentTensor> {
        if z.shape()[0] != self.config.latent_channels {
            return Err(shape_mismatch("latent", &[self.config.latent_channels], &z.shape()[..1]));
        }
        let mut s = Session::inference();
        let zv = s.graph.constant(z.tensor().clone());
        let cv = s.graph.constant(c.values.clone());
        let out = self.unet_vars(&mut s, zv, cv)?;
        LatentTensor::new(s.graph.value(out).clone())
    }

    /// Single forward pass, no sampling loop and no injected noise.
    pub fn translate(&self, img: &ImageTensor, c: &ConditioningEmbedding) -> Result<ImageTensor> {
        let mut s = Session::inference();
        let x = s.graph.constant(img.tensor().clone());
        let cv = s.graph.constant(c.values.clone());
        let out = self.translate_vars(&mut s, x, cv)?;
        ImageTensor::new(s.graph.value(out).clone())
    }

    /// Names of adapted layers, for diagnostics.
    pub fn adapted_layers(&self) -> Vec<String> {
        self.config
            .layer_specs()
            .into_iter()
            .filter(|l| l.adapted)
            .map(|l| l.id)
            .collect()
    }
}
