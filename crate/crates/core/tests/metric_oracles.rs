//! Metrics checked against independent reference computations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use stydeco_core::metrics::{fid, fid_from_moments, gaussian_window, lpips, ssim, ssim_with_range, FeatureMatrix};
use stydeco_core::perceptual::FeatureNet;
use stydeco_core::rng::seeded;
use stydeco_core::separation::silhouette;
use stydeco_core::{ImageTensor, Tensor};

fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = seeded(seed);
    let data = (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    ImageTensor::new(Tensor::new(&[3, h, w], data)).unwrap()
}

/// Direct 2-D windowed SSIM: every window position, full 11×11 weights.
fn ssim_brute(a: &ImageTensor, b: &ImageTensor, range: f64) -> f64 {
    let g = gaussian_window(11, 1.5);
    let (h, w) = (a.height(), a.width());
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (mut total, mut count) = (0.0, 0);
    for ch in 0..3 {
        let (x, y) = (a.channel(ch), b.channel(ch));
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j];
                        let (p, q) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_brute_force() {
    for seed in 0..3 {
        let a = random_image(seed, 16, 19);
        let mut b = a.clone().into_tensor();
        let mut rng = seeded(100 + seed);
        b.data_mut().iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.3..0.3)).clamp(-1.0, 1.0));
        let b = ImageTensor::new(b).unwrap();
        for range in [1.0, 2.0] {
            let fast = ssim_with_range(&a, &b, range).unwrap();
            let slow = ssim_brute(&a, &b, range);
            assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        }
    }
}

#[test]
fn ssim_identity_and_constants() {
    let a = random_image(7, 24, 24);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    // Constant planes: luminance term only, (2pq + C1) / (p² + q² + C1).
    let c1 = 1e-4;
    for (p, q) in [(0.0, 1.0), (0.25, 0.75), (0.5, 0.5)] {
        let got = ssim_with_range(&ImageTensor::filled(16, 16, p), &ImageTensor::filled(16, 16, q), 1.0).unwrap();
        let want = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

/// Trace of the square root of a 2×2 product with positive eigenvalues:
/// `(√λ1 + √λ2)² = tr M + 2 √det M`.
fn trace_sqrt_2x2(m: &DMatrix<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    (tr + 2.0 * det.sqrt()).sqrt()
}

#[test]
fn fid_two_by_two_closed_form() {
    let s1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
    let s2 = DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 1.5]);
    let mu1 = DVector::from_vec(vec![0.3, -1.0]);
    let mu2 = DVector::from_vec(vec![1.0, 0.5]);
    let want = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * trace_sqrt_2x2(&(&s1 * &s2));
    let got = fid_from_moments(&mu1, &s1, &mu2, &s2).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    let swapped = fid_from_moments(&mu2, &s2, &mu1, &s1).unwrap();
    assert_eq!(got, swapped);
}

/// `2d` rows `μ ± a·L[:, i]` whose unbiased sample moments are exactly
/// `(μ, L Lᵀ)`.
fn exact_moment_rows(mu: &[f64], l: &DMatrix<f64>) -> FeatureMatrix {
    let d = mu.len();
    let a = ((2 * d - 1) as f64 / 2.0).sqrt();
    let mut rows = Vec::new();
    for i in 0..d {
        for sign in [1.0, -1.0] {
            rows.push((0..d).map(|k| mu[k] + sign * a * l[(k, i)]).collect::<Vec<f64>>());
        }
    }
    FeatureMatrix::from_rows(&rows).unwrap()
}

#[test]
fn fid_exact_moments_diagonal_closed_form() {
    let mu1: [f64; 3] = [0.0, 1.0, -2.0];
    let mu2 = [0.5, 1.0, 0.0];
    let sd1: [f64; 3] = [1.0, 0.5, 2.0];
    let sd2 = [0.3, 0.5, 1.0];
    let l1 = DMatrix::from_diagonal(&DVector::from_row_slice(&sd1));
    let l2 = DMatrix::from_diagonal(&DVector::from_row_slice(&sd2));
    let want: f64 = (0..3).map(|i| (mu1[i] - mu2[i]).powi(2) + (sd1[i] - sd2[i]).powi(2)).sum();
    let got = fid(&exact_moment_rows(&mu1, &l1), &exact_moment_rows(&mu2, &l2)).unwrap();
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");
}

#[test]
fn fid_of_identical_sets_is_zero() {
    let mut rng = seeded(3);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let m = FeatureMatrix::from_rows(&rows).unwrap();
    assert!(fid(&m, &m).unwrap().abs() <= 1e-8);
}

#[test]
fn fid_sampled_gaussians_within_five_percent() {
    let d = 4;
    let mu1 = [0.0f64; 4];
    let mu2 = [1.5, -1.0, 0.5, 2.0];
    let sd1: [f64; 4] = [1.0, 0.7, 1.3, 0.9];
    let sd2 = [0.5, 1.2, 1.0, 0.4];
    let want: f64 = (0..d).map(|i| (mu1[i] - mu2[i]).powi(2) + (sd1[i] - sd2[i]).powi(2)).sum();
    let mut rng = seeded(11);
    let mut sample = |mu: &[f64], sd: &[f64]| {
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..d).map(|k| mu[k] + sd[k] * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    };
    let (a, b) = (sample(&mu1, &sd1), sample(&mu2, &sd2));
    let got = fid(&a, &b).unwrap();
    assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
}

#[test]
fn lpips_identity_is_zero() {
    let net = FeatureNet::new(0);
    let a = random_image(5, 32, 32);
    assert_eq!(lpips(&net, &a, &a).unwrap(), 0.0);
    assert!(lpips(&net, &a, &random_image(6, 32, 32)).unwrap() > 0.0);
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Textbook silhouette: per point `(b - a) / max(a, b)`.
fn silhouette_brute(p: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = p.len();
    let mut s = 0.0;
    for i in 0..n {
        let same: Vec<f64> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).map(|j| cos_dist(&p[i], &p[j])).collect();
        let other: Vec<f64> = (0..n).filter(|&j| labels[j] != labels[i]).map(|j| cos_dist(&p[i], &p[j])).collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().sum::<f64>() / same.len() as f64;
        let b = other.iter().sum::<f64>() / other.len() as f64;
        s += (b - a) / a.max(b);
    }
    s / n as f64
}

#[test]
fn silhouette_matches_brute_force() {
    let mut rng = seeded(21);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for i in 0..9 {
        let label = usize::from(i >= 4);
        let centre = if label == 0 { [1.0, 0.2, 0.0] } else { [0.0, 0.5, 1.0] };
        pts.push(centre.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect());
        labels.push(label);
    }
    let got = silhouette(&pts, &labels);
    let want = silhouette_brute(&pts, &labels);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(got > 0.0);
}
