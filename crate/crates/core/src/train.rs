//! The cycle-consistent training objective and a single optimization step.
//!
//! Per sample, two loops share one translator `G`:
//! forward `x_s → G(x_s, c_t) → G(·, c_s) ≈ x_s` and reverse
//! `x_p → G(x_p, c_s) → G(·, c_t) ≈ x_p`. Both reconstructions contribute
//! L1 and perceptual terms; the text embeddings of the two prompt families
//! contribute the separation term.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::config::{ExperimentConfig, LossWeights, TrainingMode};
use crate::error::{Error, Result};
use crate::generator::GeneratorWeights;
use crate::image::ImageTensor;
use crate::losses::{separation_vars, LossBreakdown};
use crate::optim::{clip_grad_norm, AdamW};
use crate::params::{ParamGroup, ParamKey, Session, TrainableSet};
use crate::perceptual::FeatureNet;
use crate::tensor::Tensor;
use crate::text::{TextDomain, TextEncoderWeights};
use crate::tokenizer::{tokenize, TokenSequence};

/// One `(x_s, x_p)` training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub source: ImageTensor,
    pub pseudo: ImageTensor,
}

/// Tokenized prompt families; index 0 of each is the main prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub source: Vec<TokenSequence>,
    pub target: Vec<TokenSequence>,
}

impl PromptSet {
    pub fn new(source: &[&str], target: &[&str], max_tokens: usize) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("prompt family"));
        }
        Ok(Self {
            source: source.iter().map(|p| tokenize(p, max_tokens)).collect(),
            target: target.iter().map(|p| tokenize(p, max_tokens)).collect(),
        })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Self::new(
            &cfg.prompts.source_family(),
            &cfg.prompts.target_family(),
            cfg.text_encoder.max_tokens,
        )
    }
}

/// Everything the objective reads: both encoders, the translator and the
/// frozen perceptual network.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub text: TextEncoderWeights,
    pub generator: GeneratorWeights,
    pub perceptual: FeatureNet,
}

impl Models {
    /// Fresh models for `cfg`; adapters are attached unless the mode is
    /// `no_lora`.
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let mut text = TextEncoderWeights::init(cfg.text_encoder.clone(), cfg.seed)?;
        let mut generator = GeneratorWeights::init(cfg.generator.clone(), cfg.seed)?;
        if cfg.training_mode != TrainingMode::NoLora {
            text.attach_fresh_adapters(cfg.seed, cfg.lora.rank, cfg.lora.alpha)?;
            generator.attach_fresh_adapters(cfg.seed, cfg.lora.rank, cfg.lora.alpha)?;
        }
        Ok(Self {
            text,
            generator,
            perceptual: FeatureNet::new(cfg.perceptual_seed),
        })
    }

    pub fn tensor(&self, key: &ParamKey) -> Option<&Tensor> {
        let name = key.name.as_str();
        match key.group {
            ParamGroup::TextBase => self.text.base.get(name),
            ParamGroup::SourceAdapters => adapter_tensor(&self.text.source, name),
            ParamGroup::TargetAdapters => adapter_tensor(&self.text.target, name),
            ParamGroup::GeneratorBase => self.generator.base.get(name),
            ParamGroup::GeneratorAdapters => adapter_tensor(&self.generator.adapters, name),
        }
    }

    pub fn tensor_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        let name = key.name.as_str();
        match key.group {
            ParamGroup::TextBase => self.text.base.get_mut(name),
            ParamGroup::SourceAdapters => self.text.source.tensor_mut(name),
            ParamGroup::TargetAdapters => self.text.target.tensor_mut(name),
            ParamGroup::GeneratorBase => self.generator.base.get_mut(name),
            ParamGroup::GeneratorAdapters => self.generator.adapters.tensor_mut(name),
        }
    }

    /// All tensors of one group, by name.
    pub fn group_tensors(&self, group: ParamGroup) -> Vec<(String, &Tensor)> {
        match group {
            ParamGroup::TextBase => self.text.base.iter().map(|(k, v)| (k.clone(), v)).collect(),
            ParamGroup::SourceAdapters => self.text.source.named_tensors(),
            ParamGroup::TargetAdapters => self.text.target.named_tensors(),
            ParamGroup::GeneratorBase => self.generator.base.iter().map(|(k, v)| (k.clone(), v)).collect(),
            ParamGroup::GeneratorAdapters => self.generator.adapters.named_tensors(),
        }
    }
}

fn adapter_tensor<'a>(set: &'a crate::lora::AdapterSet, name: &str) -> Option<&'a Tensor> {
    let (layer, which) = name.rsplit_once('.')?;
    let ad = set.get(layer)?;
    match which {
        "A" => Some(&ad.a),
        "B" => Some(&ad.b),
        _ => None,
    }
}

/// What `G` does inside the objective. `Identity` bypasses the network
/// entirely and exists to test the loss plumbing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Translator {
    #[default]
    Generator,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub temperature: f64,
    pub reduced_precision: bool,
    pub translator: Translator,
}

impl Objective {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            weights: cfg.loss_weights,
            temperature: cfg.separation_temperature,
            reduced_precision: cfg.mixed_precision,
            translator: Translator::Generator,
        }
    }
}

/// Scalar nodes of the composite loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cycle_l1: Var,
    pub perceptual: Var,
    pub separation: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, s: &Session) -> LossBreakdown {
        LossBreakdown {
            cycle_l1: s.graph.value(self.cycle_l1).item(),
            perceptual: s.graph.value(self.perceptual).item(),
            separation: s.graph.value(self.separation).item(),
            total: s.graph.value(self.total).item(),
        }
    }
}

/// Builds the composite loss for `batch` inside `s`.
pub fn composite_loss(
    s: &mut Session,
    models: &Models,
    prompts: &PromptSet,
    batch: &[PairSample],
    obj: &Objective,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut src_embs = Vec::with_capacity(prompts.source.len());
    for t in &prompts.source {
        src_embs.push(models.text.forward(s, t, Some(TextDomain::Source))?);
    }
    let mut tgt_embs = Vec::with_capacity(prompts.target.len());
    for t in &prompts.target {
        tgt_embs.push(models.text.forward(s, t, Some(TextDomain::Target))?);
    }
    let (c_s, c_t) = (src_embs[0], tgt_embs[0]);

    let g = |s: &mut Session, x: Var, c: Var| -> Result<Var> {
        match obj.translator {
            Translator::Generator => models.generator.translate_vars(s, x, c),
            Translator::Identity => Ok(x),
        }
    };

    let inv_b = 1.0 / batch.len() as f64;
    let mut l1_terms = Vec::with_capacity(2 * batch.len());
    let mut perc_terms = Vec::with_capacity(2 * batch.len());
    for sample in batch {
        sample.source.same_shape(&sample.pseudo)?;
        let x_s = s.graph.constant(sample.source.tensor().clone());
        let x_p = s.graph.constant(sample.pseudo.tensor().clone());
        let y_t = g(s, x_s, c_t)?;
        let rec_s = g(s, y_t, c_s)?;
        let y_s = g(s, x_p, c_s)?;
        let rec_p = g(s, y_s, c_t)?;
        for (rec, orig) in [(rec_s, x_s), (rec_p, x_p)] {
            l1_terms.push((s.graph.mean_abs_diff(rec, orig), inv_b));
            perc_terms.push((models.perceptual.distance_vars(s, rec, orig), inv_b));
        }
    }
    let cycle_l1 = s.graph.weighted_sum(&l1_terms);
    let perceptual = s.graph.weighted_sum(&perc_terms);

    let sm: Vec<(Var, &[bool])> = src_embs
        .iter()
        .zip(&prompts.source)
        .map(|(v, t)| (*v, t.attention_mask.as_slice()))
        .collect();
    let tm: Vec<(Var, &[bool])> = tgt_embs
        .iter()
        .zip(&prompts.target)
        .map(|(v, t)| (*v, t.attention_mask.as_slice()))
        .collect();
    let separation = separation_vars(s, &sm, &tm, obj.temperature)?;

    let w = obj.weights;
    let total = s.graph.weighted_sum(&[
        (cycle_l1, w.l1),
        (perceptual, w.perceptual),
        (separation, w.separation),
    ]);
    Ok(LossVars {
        cycle_l1,
        perceptual,
        separation,
        total,
    })
}

/// Loss values only.
pub fn evaluate_losses(
    models: &Models,
    prompts: &PromptSet,
    batch: &[PairSample],
    obj: &Objective,
) -> Result<LossBreakdown> {
    let mut s = Session::inference().with_reduced_precision(obj.reduced_precision);
    let vars = composite_loss(&mut s, models, prompts, batch, obj)?;
    Ok(vars.values(&s))
}

/// Loss values and gradients for every parameter in `trainable`.
pub fn loss_and_grads(
    models: &Models,
    prompts: &PromptSet,
    batch: &[PairSample],
    obj: &Objective,
    trainable: TrainableSet,
) -> Result<(LossBreakdown, BTreeMap<ParamKey, Tensor>)> {
    let mut s = Session::new(trainable).with_reduced_precision(obj.reduced_precision);
    let vars = composite_loss(&mut s, models, prompts, batch, obj)?;
    let losses = vars.values(&s);
    let mut grads = s.graph.backward(vars.total);
    Ok((losses, s.param_grads(&mut grads)))
}

/// Parameter groups updated at `step` (0-based) of a `total_steps` run.
pub fn trainable_groups(mode: TrainingMode, step: u64, total_steps: u64, split: f64) -> TrainableSet {
    match mode {
        TrainingMode::Joint => TrainableSet::of(&[
            ParamGroup::GeneratorAdapters,
            ParamGroup::SourceAdapters,
            ParamGroup::TargetAdapters,
        ]),
        TrainingMode::TwoStage => {
            if step < stage_boundary(total_steps, split) {
                TrainableSet::of(&[ParamGroup::GeneratorAdapters])
            } else {
                TrainableSet::of(&[ParamGroup::SourceAdapters, ParamGroup::TargetAdapters])
            }
        }
        TrainingMode::NoLora => TrainableSet::of(&[ParamGroup::GeneratorBase]),
    }
}

/// First step of the second stage.
pub fn stage_boundary(total_steps: u64, split: f64) -> u64 {
    libm::round(total_steps as f64 * split) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamW,
    /// Micro-batches drawn from the data stream so far.
    pub batches_consumed: u64,
    pub mode: TrainingMode,
}

impl TrainState {
    pub fn new(mode: TrainingMode) -> Self {
        Self {
            step: 0,
            optimizer: AdamW::new(),
            batches_consumed: 0,
            mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer update from `micro_batches` (one per accumulation step).
///
/// Gradients and losses are averaged over the micro-batches, clipped to
/// `cfg.grad_clip_norm`, and applied with AdamW.
pub fn training_step(
    models: &mut Models,
    prompts: &PromptSet,
    micro_batches: &[Vec<PairSample>],
    state: &mut TrainState,
    cfg: &ExperimentConfig,
) -> Result<StepReport> {
    if micro_batches.is_empty() || micro_batches.iter().any(Vec::is_empty) {
        return Err(Error::Empty("batch"));
    }
    let obj = Objective::from_config(cfg);
    let trainable = trainable_groups(
        state.mode,
        state.step,
        cfg.train_steps as u64,
        cfg.two_stage_split,
    );
    let inv = 1.0 / micro_batches.len() as f64;
    let mut grads: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
    let mut terms = [0.0f64; 3];
    for mb in micro_batches {
        let (l, g) = loss_and_grads(models, prompts, mb, &obj, trainable)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                cycle_l1: l.cycle_l1,
                perceptual: l.perceptual,
                separation: l.separation,
            });
        }
        terms[0] += inv * l.cycle_l1;
        terms[1] += inv * l.perceptual;
        terms[2] += inv * l.separation;
        for (k, mut t) in g {
            t.scale_in_place(inv);
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(k, t);
                }
            }
        }
    }
    let w = obj.weights;
    let losses = LossBreakdown {
        cycle_l1: terms[0],
        perceptual: terms[1],
        separation: terms[2],
        total: w.l1 * terms[0] + w.perceptual * terms[1] + w.separation * terms[2],
    };
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            cycle_l1: losses.cycle_l1,
            perceptual: losses.perceptual,
            separation: losses.separation,
        });
    }
    let adamw = cfg.adamw();
    for (key, g) in &grads {
        let param = models
            .tensor_mut(key)
            .ok_or_else(|| Error::MissingParameter(alloc::format!("{key}")))?;
        state.optimizer.update(&adamw, key, param, g);
    }
    let report = StepReport {
        step: state.step,
        losses,
        grad_norm,
    };
    state.step += 1;
    state.batches_consumed += micro_batches.len() as u64;
    Ok(report)
}

/// Mean forward-loop reconstruction error `L1(G(G(x, c_t), c_s), x)`.
pub fn validation_cycle_l1(models: &Models, prompts: &PromptSet, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("validation images"));
    }
    let c_s = models.text.encode_domain(&prompts.source[0], TextDomain::Source)?;
    let c_t = models.text.encode_domain(&prompts.target[0], TextDomain::Target)?;
    let mut total = 0.0;
    for x in images {
        let y = models.generator.translate(x, &c_t)?;
        let rec = models.generator.translate(&y, &c_s)?;
        total += crate::losses::cycle_loss(&rec, x)?;
    }
    Ok(total / images.len() as f64)
}
