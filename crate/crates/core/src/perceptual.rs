//! Frozen, seed-initialized convolutional feature network.
//!
//! Serves as the perceptual distance used by both the training objective and
//! the LPIPS-style evaluation metric, and (with a different seed) as the
//! feature extractor for FID and the aesthetic head.

use alloc::vec::Vec;

use crate::autograd::{Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::params::Session;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Output channels of the three stride-2 feature layers.
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];

pub const FEATURE_CONV: Conv2dSpec = Conv2dSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    seed: u64,
    /// `(weight [c_out, c_in·9], bias [c_out])` per layer.
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut layers = Vec::with_capacity(FEATURE_CHANNELS.len());
        let mut c_in = 3;
        for (i, &c_out) in FEATURE_CHANNELS.iter().enumerate() {
            let mut rng = seeded(derive_seed(seed, &alloc::format!("feature.{i}")));
            let fan_in = c_in * 9;
            let w = Tensor::randn(&[c_out, fan_in], libm::sqrt(2.0 / fan_in as f64), &mut rng);
            let b = Tensor::randn(&[c_out], 0.01, &mut rng);
            layers.push((w, b));
            c_in = c_out;
        }
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        FEATURE_CHANNELS[FEATURE_CHANNELS.len() - 1]
    }

    /// Post-ReLU activations of every layer.
    pub fn feature_vars(&self, s: &mut Session, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (w, b) in &self.layers {
            let wv = s.graph.constant(w.clone());
            let bv = s.graph.constant(b.clone());
            h = s.graph.conv2d(h, wv, Some(bv), FEATURE_CONV);
            h = s.graph.relu(h);
            out.push(h);
        }
        out
    }

    /// `Σ_layers mean_position ‖f̂(a) − f̂(b)‖²` with `f̂` unit-normalized
    /// across channels at every position.
    pub fn distance_vars(&self, s: &mut Session, a: Var, b: Var) -> Var {
        let fa = self.feature_vars(s, a);
        let fb = self.feature_vars(s, b);
        let mut terms = Vec::with_capacity(fa.len());
        for (xa, xb) in fa.into_iter().zip(fb) {
            let shape = s.graph.shape(xa);
            let positions = (shape[1] * shape[2]) as f64;
            let na = s.graph.channel_unit_norm(xa);
            let nb = s.graph.channel_unit_norm(xb);
            let d = s.graph.squared_diff_sum(na, nb);
            terms.push((d, 1.0 / positions));
        }
        s.graph.weighted_sum(&terms)
    }

    pub fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        a.same_shape(b)?;
        if a.height() < 2 || a.width() < 2 {
            return Err(Error::InvalidArgument("image too small for feature net".into()));
        }
        let mut s = Session::inference();
        let av = s.graph.constant(a.tensor().clone());
        let bv = s.graph.constant(b.tensor().clone());
        let d = self.distance_vars(&mut s, av, bv);
        Ok(s.graph.value(d).item())
    }

    pub fn feature_maps(&self, img: &ImageTensor) -> Vec<Tensor> {
        let mut s = Session::inference();
        let x = s.graph.constant(img.tensor().clone());
        self.feature_vars(&mut s, x)
            .into_iter()
            .map(|v| s.graph.value(v).clone())
            .collect()
    }

    /// Global average pool of the last layer.
    pub fn pooled_features(&self, img: &ImageTensor) -> Vec<f64> {
        let last = self.feature_maps(img).pop().expect("feature net has layers");
        let c = last.shape()[0];
        let per = last.len() / c;
        last.data()
            .chunks(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> ImageTensor {
        let mut rng = seeded(seed);
        ImageTensor::new(Tensor::randn(&[3, 16, 16], 0.4, &mut rng).map(libm::tanh)).unwrap()
    }

    #[test]
    fn identity_and_symmetry() {
        let net = FeatureNet::new(0);
        let (a, b) = (img(1), img(2));
        assert_eq!(net.distance(&a, &a).unwrap(), 0.0);
        let ab = net.distance(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, net.distance(&b, &a).unwrap());
    }

    #[test]
    fn pooled_dim() {
        let net = FeatureNet::new(3);
        assert_eq!(net.pooled_features(&img(4)).len(), 64);
    }

    #[test]
    fn shape_mismatch() {
        let net = FeatureNet::new(0);
        assert!(net.distance(&img(1), &ImageTensor::filled(8, 8, 0.0)).is_err());
    }
}
