//! Scalar training losses: cycle L1, perceptual distance and the domain
//! separation term on text embeddings.

use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::Session;
use crate::perceptual::FeatureNet;
use crate::text::{pooling_weights, ConditioningEmbedding};

/// Mean absolute error over all elements.
pub fn cycle_loss(reconstructed: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    reconstructed.same_shape(original)?;
    let mut s = Session::inference();
    let a = s.graph.constant(reconstructed.tensor().clone());
    let b = s.graph.constant(original.tensor().clone());
    let l = s.graph.mean_abs_diff(a, b);
    Ok(s.graph.value(l).item())
}

pub fn perceptual_loss(net: &FeatureNet, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    net.distance(a, b)
}

/// Two-prototype InfoNCE over mask-pooled, L2-normalized embeddings.
///
/// Every embedding is scored against the normalized centroid of each domain
/// (cosine / `temperature`) and classified with softmax cross-entropy; the
/// loss is the mean over both domains. Identical domains give `ln 2`.
///
/// `source`/`target` hold `(embedding [T, d], attention mask)` pairs.
pub fn separation_vars(
    s: &mut Session,
    source: &[(Var, &[bool])],
    target: &[(Var, &[bool])],
    temperature: f64,
) -> Result<Var> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("separation batch"));
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut pooled = Vec::with_capacity(source.len() + target.len());
    let mut labels = Vec::with_capacity(pooled.capacity());
    for (label, family) in [(0usize, source), (1, target)] {
        for (emb, mask) in family {
            let w = pooling_weights(mask);
            pooled.push(s.graph.weighted_sum_rows(*emb, &w));
            labels.push(label);
        }
    }
    let stacked = s.graph.concat_rows(&pooled);
    let unit = s.graph.l2_normalize_rows(stacked);

    let (ns, nt) = (source.len(), target.len());
    let mut centroids = Vec::with_capacity(2);
    for label in [0usize, 1] {
        let n = if label == 0 { ns } else { nt } as f64;
        let w: Vec<f64> = labels
            .iter()
            .map(|l| if *l == label { 1.0 / n } else { 0.0 })
            .collect();
        centroids.push(s.graph.weighted_sum_rows(unit, &w));
    }
    let protos = s.graph.concat_rows(&centroids);
    let protos = s.graph.l2_normalize_rows(protos);
    let cos = s.graph.matmul(unit, protos, true);
    let logits = s.graph.scale(cos, 1.0 / temperature);
    Ok(s.graph.softmax_cross_entropy(logits, &labels))
}

pub fn separation_loss(
    source: &[ConditioningEmbedding],
    target: &[ConditioningEmbedding],
    temperature: f64,
) -> Result<f64> {
    let mut s = Session::inference();
    let bind = |s: &mut Session, e: &ConditioningEmbedding| s.graph.constant(e.values.clone());
    let sv: Vec<Var> = source.iter().map(|e| bind(&mut s, e)).collect();
    let tv: Vec<Var> = target.iter().map(|e| bind(&mut s, e)).collect();
    let sp: Vec<(Var, &[bool])> = sv.iter().zip(source).map(|(v, e)| (*v, e.mask.as_slice())).collect();
    let tp: Vec<(Var, &[bool])> = tv.iter().zip(target).map(|(v, e)| (*v, e.mask.as_slice())).collect();
    let l = separation_vars(&mut s, &sp, &tp, temperature)?;
    Ok(s.graph.value(l).item())
}

/// Per-term losses of one step (or one averaged accumulation window).
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub cycle_l1: f64,
    pub perceptual: f64,
    pub separation: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.cycle_l1.is_finite()
            && self.perceptual.is_finite()
            && self.separation.is_finite()
            && self.total.is_finite()
    }
}
