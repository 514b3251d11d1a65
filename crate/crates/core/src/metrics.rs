//! Evaluation metrics: FID over pluggable features, SSIM, LPIPS-style
//! perceptual distance and a pluggable aesthetic score.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::image::ImageTensor;
use crate::perceptual::FeatureNet;
use crate::rng::{derive_seed, seeded};

/// Eigenvalues below this fraction of the largest are treated as zero when
/// taking matrix square roots.
const EIG_REL_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Value range of images in `[-1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;

/// One row of features per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(shape_mismatch("feature matrix", &[rows, cols], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("feature rows differ in length".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageTensor) -> Vec<f64>;
}

/// Seeded random conv net with global average pooling (dim 64).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExtractor {
    net: FeatureNet,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        Self {
            net: FeatureNet::new(derive_seed(seed, "extractor")),
        }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn extract(&self, img: &ImageTensor) -> Vec<f64> {
        self.net.pooled_features(img)
    }
}

pub fn extract_features(images: &[ImageTensor], extractor: &dyn FeatureExtractor) -> Result<FeatureMatrix> {
    if images.is_empty() {
        return Err(Error::Empty("image list"));
    }
    let rows: Vec<Vec<f64>> = images.iter().map(|i| extractor.extract(i)).collect();
    FeatureMatrix::from_rows(&rows)
}

/// Sample mean and unbiased covariance.
pub fn mean_and_covariance(m: &FeatureMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if m.rows < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "FID needs at least 2 rows, got {}",
            m.rows
        )));
    }
    let x = DMatrix::from_row_slice(m.rows, m.cols, &m.values);
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (m.rows - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floor = EIG_REL_FLOOR * eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let roots = eig.eigenvalues.map(|l| if l > floor { libm::sqrt(l) } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((Σ₁Σ₂)^{1/2})` via the symmetric form `√(Σ₁^{1/2} Σ₂ Σ₁^{1/2})`.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let r = sym_sqrt(s1);
    let m = &r * s2 * &r;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let floor = EIG_REL_FLOOR * eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    eig.eigenvalues
        .iter()
        .map(|&l| if l > floor { libm::sqrt(l) } else { 0.0 })
        .sum()
}

/// Fréchet distance between two Gaussians given their moments.
///
/// The cross term is averaged over both sandwich orders, which makes the
/// result exactly symmetric in its arguments.
pub fn fid_from_moments(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(shape_mismatch("fid moments", &[d, d], &[s2.nrows(), s2.ncols()]));
    }
    if mu1 == mu2 && s1 == s2 {
        return Ok(0.0);
    }
    let mean_term = (mu1 - mu2).norm_squared();
    let cross = 0.5 * (trace_sqrt_product(s1, s2) + trace_sqrt_product(s2, s1));
    let fid = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(fid.max(0.0))
}

pub fn fid(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.cols != b.cols {
        return Err(shape_mismatch("feature matrix columns", &[a.cols], &[b.cols]));
    }
    let (mu1, s1) = mean_and_covariance(a)?;
    let (mu2, s2) = mean_and_covariance(b)?;
    fid_from_moments(&mu1, &s1, &mu2, &s2)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = alloc::vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|j| k[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// SSIM for images with dynamic range `range`; mean over valid 11×11
/// Gaussian windows and over channels.
pub fn ssim_with_range(a: &ImageTensor, b: &ImageTensor, range: f64) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(alloc::format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cxy + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with_range(a, b, SSIM_RANGE)
}

pub fn lpips(net: &FeatureNet, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    net.distance(a, b)
}

/// Scores one image's aesthetic quality.
pub trait AestheticScorer {
    fn score(&self, img: &ImageTensor) -> f64;
}

/// `w · features(img) + bias` over a feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAestheticHead {
    pub extractor: ToyExtractor,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearAestheticHead {
    pub fn seeded(seed: u64) -> Self {
        let extractor = ToyExtractor::new(seed);
        let mut rng = seeded(derive_seed(seed, "aesthetic"));
        let dim = extractor.dim();
        let std = 1.0 / libm::sqrt(dim as f64);
        let weights = crate::tensor::Tensor::randn(&[dim], std, &mut rng).into_data();
        Self {
            extractor,
            weights,
            bias: 5.0,
        }
    }

    pub fn zeros(seed: u64) -> Self {
        let extractor = ToyExtractor::new(seed);
        let dim = extractor.dim();
        Self {
            extractor,
            weights: alloc::vec![0.0; dim],
            bias: 0.0,
        }
    }
}

impl AestheticScorer for LinearAestheticHead {
    fn score(&self, img: &ImageTensor) -> f64 {
        let f = self.extractor.extract(img);
        self.bias + f.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

pub fn aesthetic_score(img: &ImageTensor, scorer: &dyn AestheticScorer) -> f64 {
    scorer.score(img)
}

/// The four-metric row, with the set sizes it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub ssim_mean: f64,
    pub lpips_mean: f64,
    pub clip_ae_mean: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub n_source: usize,
}

/// The pluggable pieces `evaluate_sets` composes.
pub struct MetricSuite {
    pub extractor: Box<dyn FeatureExtractor + Send + Sync>,
    pub perceptual: FeatureNet,
    pub scorer: Box<dyn AestheticScorer + Send + Sync>,
}

impl MetricSuite {
    /// Built-in seeded extractor, perceptual net and aesthetic head.
    pub fn toy(metrics_seed: u64, perceptual_seed: u64) -> Self {
        Self {
            extractor: Box::new(ToyExtractor::new(metrics_seed)),
            perceptual: FeatureNet::new(perceptual_seed),
            scorer: Box::new(LinearAestheticHead::seeded(metrics_seed)),
        }
    }
}

/// FID(generated, reference); SSIM and LPIPS over `(generated[i],
/// sources[i])`; aesthetic mean over `generated`.
pub fn evaluate_sets(
    generated: &[ImageTensor],
    reference: &[ImageTensor],
    sources: &[ImageTensor],
    suite: &MetricSuite,
) -> Result<MetricsReport> {
    if generated.is_empty() || reference.is_empty() || sources.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if generated.len() != sources.len() {
        return Err(shape_mismatch("generated/source pairs", &[generated.len()], &[sources.len()]));
    }
    let fg = extract_features(generated, suite.extractor.as_ref())?;
    let fr = extract_features(reference, suite.extractor.as_ref())?;
    let fid = fid(&fg, &fr)?;
    let mut ssim_sum = 0.0;
    let mut lpips_sum = 0.0;
    for (g, s) in generated.iter().zip(sources) {
        ssim_sum += ssim(g, s)?;
        lpips_sum += lpips(&suite.perceptual, g, s)?;
    }
    let ae: f64 = generated.iter().map(|g| suite.scorer.score(g)).sum();
    let n = generated.len() as f64;
    Ok(MetricsReport {
        fid,
        ssim_mean: ssim_sum / n,
        lpips_mean: lpips_sum / n,
        clip_ae_mean: ae / n,
        n_generated: generated.len(),
        n_reference: reference.len(),
        n_source: sources.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fid_closed_form_2d() {
        let mu1 = DVector::from_vec(alloc::vec![0.0, 0.0]);
        let mu2 = DVector::from_vec(alloc::vec![1.0, 0.0]);
        let i = DMatrix::<f64>::identity(2, 2);
        let f = fid_from_moments(&mu1, &i, &mu2, &i).unwrap();
        assert!((f - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fid_needs_two_rows() {
        let a = FeatureMatrix::new(1, 2, alloc::vec![0.0, 1.0]).unwrap();
        assert!(fid(&a, &a).is_err());
        let b = FeatureMatrix::new(2, 1, alloc::vec![0.0, 1.0]).unwrap();
        assert!(fid(&b, &FeatureMatrix::new(2, 2, alloc::vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn ssim_identity_and_small() {
        let mut rng = seeded(5);
        let a = ImageTensor::new(Tensor::randn(&[3, 16, 16], 0.3, &mut rng)).unwrap();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&ImageTensor::filled(8, 8, 0.0), &ImageTensor::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - w[10]).abs() < 1e-18);
    }

    #[test]
    fn zero_head_scores_zero() {
        let img = ImageTensor::filled(16, 16, 0.2);
        assert_eq!(aesthetic_score(&img, &LinearAestheticHead::zeros(1)), 0.0);
    }
}
