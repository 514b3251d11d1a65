//! Low-rank adapters over frozen linear maps.
//!
//! An adapter holds `A: [r, d_in]` and `B: [d_out, r]` and turns a frozen
//! weight `W` into `W + (alpha / r) · B · A`. `B` starts at zero, so a fresh
//! adapter leaves the adapted layer bit-for-bit unchanged.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::{shape_mismatch, Error, Result};
use crate::params::{LayerSpec, ParamGroup, ParamMap, Session};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for `A`.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub target_layer_id: String,
}

impl LoraAdapter {
    pub fn init(
        target_layer_id: impl Into<String>,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ZeroRank);
        }
        if rank > d_in.min(d_out) {
            return Err(Error::RankTooLarge { rank, d_in, d_out });
        }
        let mut rng = seeded(seed);
        Ok(Self {
            a: Tensor::randn(&[rank, d_in], A_INIT_STD, &mut rng),
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            alpha,
            target_layer_id: target_layer_id.into(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn parameter_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// `(alpha / r) · B · A`, shaped like the adapted weight.
    pub fn delta_weight(&self) -> Tensor {
        let mut d = self.b.matmul(&self.a);
        d.scale_in_place(self.scale());
        d
    }

    fn check_weight(&self, w: &Tensor) -> Result<()> {
        let expected = [self.d_out(), self.d_in()];
        if w.shape() != expected {
            return Err(shape_mismatch(&self.target_layer_id, &expected, w.shape()));
        }
        Ok(())
    }

    fn check_invariants(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::ZeroRank);
        }
        if self.a.shape() != [self.rank, self.a.shape()[1]] || self.b.shape()[1] != self.rank {
            return Err(shape_mismatch(
                &self.target_layer_id,
                &[self.rank],
                &[self.a.shape()[0], self.b.shape()[1]],
            ));
        }
        Ok(())
    }
}

/// `y = W·x + (alpha / r)·B·(A·x)`, evaluated without forming `B·A`.
pub fn apply_adapted(w: &Tensor, adapter: &LoraAdapter, x: &[f64]) -> Result<Vec<f64>> {
    adapter.check_weight(w)?;
    if x.len() != adapter.d_in() {
        return Err(shape_mismatch("adapted input", &[adapter.d_in()], &[x.len()]));
    }
    let (d_out, d_in, r) = (adapter.d_out(), adapter.d_in(), adapter.rank);
    let wd = w.data();
    let mut y: Vec<f64> = (0..d_out)
        .map(|i| (0..d_in).map(|j| wd[i * d_in + j] * x[j]).sum())
        .collect();
    let ax: Vec<f64> = (0..r)
        .map(|k| (0..d_in).map(|j| adapter.a.data()[k * d_in + j] * x[j]).sum())
        .collect();
    let s = adapter.scale();
    for (i, yi) in y.iter_mut().enumerate() {
        let bax: f64 = (0..r).map(|k| adapter.b.data()[i * r + k] * ax[k]).sum();
        *yi += s * bax;
    }
    Ok(y)
}

/// `W' = W + (alpha / r)·B·A`.
pub fn merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check_weight(w)?;
    let mut out = w.clone();
    out.add_assign(&adapter.delta_weight());
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdapterDomain {
    Source,
    Target,
    Generator,
}

impl AdapterDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterDomain::Source => "source",
            AdapterDomain::Target => "target",
            AdapterDomain::Generator => "generator",
        }
    }

    pub fn param_group(self) -> ParamGroup {
        match self {
            AdapterDomain::Source => ParamGroup::SourceAdapters,
            AdapterDomain::Target => ParamGroup::TargetAdapters,
            AdapterDomain::Generator => ParamGroup::GeneratorAdapters,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub domain: AdapterDomain,
    pub adapters: BTreeMap<String, LoraAdapter>,
}

impl AdapterSet {
    pub fn empty(domain: AdapterDomain) -> Self {
        Self {
            domain,
            adapters: BTreeMap::new(),
        }
    }

    /// One fresh adapter per adapted layer.
    ///
    /// Layers narrower than `rank` get rank `min(d_in, d_out)` with alpha
    /// rescaled so every adapter in the set shares the scale `alpha / rank`.
    pub fn for_layers(
        domain: AdapterDomain,
        layers: &[LayerSpec],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::ZeroRank);
        }
        let mut adapters = BTreeMap::new();
        for layer in layers.iter().filter(|l| l.adapted) {
            let (d_in, d_out) = layer.linear_dims().ok_or_else(|| {
                Error::InvalidArgument(format!("layer `{}` cannot take an adapter", layer.id))
            })?;
            let r = rank.min(d_in).min(d_out);
            let a = alpha * r as f64 / rank as f64;
            let layer_seed = derive_seed(seed, &format!("{}/{}", domain.as_str(), layer.id));
            adapters.insert(
                layer.id.clone(),
                LoraAdapter::init(layer.id.clone(), d_in, d_out, r, a, layer_seed)?,
            );
        }
        Ok(Self { domain, adapters })
    }

    pub fn get(&self, layer_id: &str) -> Option<&LoraAdapter> {
        self.adapters.get(layer_id)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.values().map(LoraAdapter::parameter_count).sum()
    }

    /// Every `A` then `B` entry of every adapter, in layer order. Base
    /// weights never appear here.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for ad in self.adapters.values() {
            out.extend_from_slice(ad.a.data());
            out.extend_from_slice(ad.b.data());
        }
        out
    }

    /// Mutable access by parameter name `"<layer_id>.A"` / `"<layer_id>.B"`.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (layer, which) = name.rsplit_once('.')?;
        let ad = self.adapters.get_mut(layer)?;
        match which {
            "A" => Some(&mut ad.a),
            "B" => Some(&mut ad.b),
            _ => None,
        }
    }

    /// Named `A`/`B` tensors, as used for gradient keys.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.len());
        for (id, ad) in &self.adapters {
            out.push((format!("{id}.A"), &ad.a));
            out.push((format!("{id}.B"), &ad.b));
        }
        out
    }

    /// Every adapter targets an adapted layer of matching dimensions.
    pub fn check_against(&self, layers: &[LayerSpec]) -> Result<()> {
        for (id, ad) in &self.adapters {
            ad.check_invariants()?;
            let layer = layers
                .iter()
                .find(|l| &l.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("adapter targets unknown layer `{id}`")))?;
            let (d_in, d_out) = layer
                .linear_dims()
                .ok_or_else(|| Error::InvalidArgument(format!("layer `{id}` is not linear")))?;
            if (ad.d_in(), ad.d_out()) != (d_in, d_out) {
                return Err(shape_mismatch(id, &[d_in, d_out], &[ad.d_in(), ad.d_out()]));
            }
        }
        Ok(())
    }

    /// Folds every adapter into a copy of `base`.
    pub fn merged_into(&self, base: &ParamMap) -> Result<ParamMap> {
        let mut out = base.clone();
        for (id, ad) in &self.adapters {
            let key = format!("{id}.weight");
            let w = out
                .get_mut(&key)
                .ok_or_else(|| Error::MissingParameter(key.clone()))?;
            *w = merge(w, ad)?;
        }
        Ok(out)
    }
}

/// Adapter set bound to the parameter group its gradients belong to.
#[derive(Clone, Copy)]
pub struct AdapterRef<'a> {
    pub set: &'a AdapterSet,
    pub group: ParamGroup,
}

impl<'a> AdapterRef<'a> {
    pub fn new(set: &'a AdapterSet) -> Self {
        Self {
            set,
            group: set.domain.param_group(),
        }
    }
}

/// Weight of `layer_id` as seen by the forward pass: the frozen base plus
/// the adapter delta when one is attached.
pub(crate) fn effective_weight(
    s: &mut Session,
    base_group: ParamGroup,
    base: &ParamMap,
    layer_id: &str,
    adapters: Option<AdapterRef<'_>>,
) -> Result<Var> {
    let w = s.param_from(base_group, base, &format!("{layer_id}.weight"))?;
    let Some(r) = adapters else { return Ok(w) };
    let Some(ad) = r.set.get(layer_id) else {
        return Ok(w);
    };
    let cache_key = format!("{}+{}:{layer_id}", base_group.as_str(), r.group.as_str());
    if let Some(v) = s.recall(&cache_key) {
        return Ok(v);
    }
    let ws = s.graph.shape(w).to_vec();
    if ws != [ad.d_out(), ad.d_in()] {
        return Err(shape_mismatch(layer_id, &ws, &[ad.d_out(), ad.d_in()]));
    }
    let a = s.param(r.group, &format!("{layer_id}.A"), &ad.a);
    let b = s.param(r.group, &format!("{layer_id}.B"), &ad.b);
    let ba = s.graph.matmul(b, a, false);
    let delta = s.graph.scale(ba, ad.scale());
    let eff = s.graph.add(w, delta);
    s.remember(cache_key, eff);
    Ok(eff)
}
