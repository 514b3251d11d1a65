//! Named parameter storage and the glue that binds parameters into a
//! [`Graph`] for one forward/backward pass.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors of one model component, e.g. `"blocks.0.attn.q.weight"`.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    TextBase,
    SourceAdapters,
    TargetAdapters,
    GeneratorBase,
    GeneratorAdapters,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::TextBase,
        ParamGroup::SourceAdapters,
        ParamGroup::TargetAdapters,
        ParamGroup::GeneratorBase,
        ParamGroup::GeneratorAdapters,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::TextBase => "text_base",
            ParamGroup::SourceAdapters => "source_adapters",
            ParamGroup::TargetAdapters => "target_adapters",
            ParamGroup::GeneratorBase => "generator_base",
            ParamGroup::GeneratorAdapters => "generator_adapters",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub name: String,
}

impl ParamKey {
    pub fn new(group: ParamGroup, name: impl Into<String>) -> Self {
        Self {
            group,
            name: name.into(),
        }
    }
}

impl core::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}/{}", self.group.as_str(), self.name)
    }
}

/// Set of parameter groups that receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainableSet(u8);

impl TrainableSet {
    pub fn none() -> Self {
        Self(0)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn groups(self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .iter()
            .copied()
            .filter(|g| self.contains(*g))
            .collect()
    }
}

/// A graph plus the parameter leaves bound into it so far.
pub struct Session {
    pub graph: Graph,
    bound: BTreeMap<ParamKey, Var>,
    derived: BTreeMap<String, Var>,
    trainable: TrainableSet,
}

impl Session {
    pub fn new(trainable: TrainableSet) -> Self {
        Self {
            graph: Graph::new(),
            bound: BTreeMap::new(),
            derived: BTreeMap::new(),
            trainable,
        }
    }

    pub fn inference() -> Self {
        Self::new(TrainableSet::none())
    }

    pub fn with_reduced_precision(mut self, enabled: bool) -> Self {
        self.graph = core::mem::take(&mut self.graph).with_reduced_precision(enabled);
        self
    }

    pub fn trainable(&self) -> TrainableSet {
        self.trainable
    }

    /// Leaf for a named parameter, created on first use.
    pub fn param(&mut self, group: ParamGroup, name: &str, value: &Tensor) -> Var {
        let key = ParamKey::new(group, name);
        if let Some(v) = self.bound.get(&key) {
            return *v;
        }
        let v = self
            .graph
            .leaf(value.clone(), self.trainable.contains(group));
        self.bound.insert(key, v);
        v
    }

    /// Node previously stored under `key` by [`Session::remember`].
    pub fn recall(&self, key: &str) -> Option<Var> {
        self.derived.get(key).copied()
    }

    /// Stores a node computed purely from bound parameters (e.g. an
    /// adapted weight) so repeated forward passes in this session reuse it.
    pub fn remember(&mut self, key: String, v: Var) {
        self.derived.insert(key, v);
    }

    /// Looks `name` up in `map` and binds it.
    pub fn param_from(&mut self, group: ParamGroup, map: &ParamMap, name: &str) -> Result<Var> {
        let t = map
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(self.param(group, name, t))
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &mut Gradients) -> BTreeMap<ParamKey, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.bound {
            if !self.trainable.contains(k.group) {
                continue;
            }
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(self.graph.value(*v).shape()));
            out.insert(k.clone(), g);
        }
        out
    }
}

/// Kind and dimensions of one parameterized layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// `weight: [d_out, d_in]`, `bias: [d_out]`.
    Linear { d_in: usize, d_out: usize },
    /// `weight: [c_out, c_in·k·k]`, `bias: [c_out]`.
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    /// `gamma, beta: [d]`.
    LayerNorm { d: usize },
    /// `weight: [rows, d]`.
    Embedding { rows: usize, d: usize },
    /// `weight: [d]` free vector.
    Vector { d: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    /// Whether a LoRA adapter attaches to this layer.
    pub adapted: bool,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, adapted: bool) -> Self {
        Self {
            id: id.into(),
            kind,
            adapted,
        }
    }

    /// `(d_in, d_out)` of the layer viewed as a linear map.
    pub fn linear_dims(&self) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Linear { d_in, d_out } => Some((d_in, d_out)),
            LayerKind::Conv {
                c_in,
                c_out,
                kernel,
            } => Some((c_in * kernel * kernel, c_out)),
            _ => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self.kind {
            LayerKind::Linear { d_in, d_out } => d_out * d_in + d_out,
            LayerKind::Conv {
                c_in,
                c_out,
                kernel,
            } => c_out * c_in * kernel * kernel + c_out,
            LayerKind::LayerNorm { d } => 2 * d,
            LayerKind::Embedding { rows, d } => rows * d,
            LayerKind::Vector { d } => d,
        }
    }

    /// Seeded initial tensors for this layer.
    pub fn init(&self, seed: u64, embedding_std: f64, out: &mut ParamMap) {
        let mut rng = crate::rng::seeded(crate::rng::derive_seed(seed, &self.id));
        let id = &self.id;
        match self.kind {
            LayerKind::Linear { .. } | LayerKind::Conv { .. } => {
                let (d_in, d_out) = self.linear_dims().unwrap();
                let std = 1.0 / libm::sqrt(d_in as f64);
                out.insert(
                    alloc::format!("{id}.weight"),
                    Tensor::randn(&[d_out, d_in], std, &mut rng),
                );
                out.insert(alloc::format!("{id}.bias"), Tensor::zeros(&[d_out]));
            }
            LayerKind::LayerNorm { d } => {
                out.insert(alloc::format!("{id}.gamma"), Tensor::ones(&[d]));
                out.insert(alloc::format!("{id}.beta"), Tensor::zeros(&[d]));
            }
            LayerKind::Embedding { rows, d } => {
                out.insert(
                    alloc::format!("{id}.weight"),
                    Tensor::randn(&[rows, d], embedding_std, &mut rng),
                );
            }
            LayerKind::Vector { d } => {
                out.insert(
                    alloc::format!("{id}.weight"),
                    Tensor::randn(&[d], 1.0, &mut rng),
                );
            }
        }
    }
}

pub fn init_param_map(layers: &[LayerSpec], seed: u64, embedding_std: f64) -> ParamMap {
    let mut out = ParamMap::new();
    for l in layers {
        l.init(seed, embedding_std, &mut out);
    }
    out
}

/// Checks that `map` holds exactly the tensors `layers` describe.
pub fn check_param_map(layers: &[LayerSpec], map: &ParamMap) -> Result<()> {
    let expected = init_shapes(layers);
    for (name, shape) in &expected {
        match map.get(name) {
            None => return Err(Error::MissingParameter(name.clone())),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(crate::error::shape_mismatch(name, shape, t.shape()))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = map.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::InvalidArgument(alloc::format!(
            "unexpected parameter `{extra}`"
        )));
    }
    Ok(())
}

fn init_shapes(layers: &[LayerSpec]) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    for l in layers {
        let id = &l.id;
        match l.kind {
            LayerKind::Linear { .. } | LayerKind::Conv { .. } => {
                let (d_in, d_out) = l.linear_dims().unwrap();
                m.insert(alloc::format!("{id}.weight"), alloc::vec![d_out, d_in]);
                m.insert(alloc::format!("{id}.bias"), alloc::vec![d_out]);
            }
            LayerKind::LayerNorm { d } => {
                m.insert(alloc::format!("{id}.gamma"), alloc::vec![d]);
                m.insert(alloc::format!("{id}.beta"), alloc::vec![d]);
            }
            LayerKind::Embedding { rows, d } => {
                m.insert(alloc::format!("{id}.weight"), alloc::vec![rows, d]);
            }
            LayerKind::Vector { d } => {
                m.insert(alloc::format!("{id}.weight"), alloc::vec![d]);
            }
        }
    }
    m
}

pub fn param_map_count(map: &ParamMap) -> usize {
    map.values().map(Tensor::len).sum()
}
