//! Cluster-separation measurements for source vs target prompt embeddings.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::ConditioningEmbedding;

/// Cosine distances below this are treated as exact zeros.
const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mean_within_source: f64,
    pub mean_within_target: f64,
    pub mean_between: f64,
    pub silhouette: f64,
    pub n_source: usize,
    pub n_target: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let d = (1.0 - cosine(a, b)).max(0.0);
    if d < DIST_FLOOR {
        0.0
    } else {
        d
    }
}

fn mean_within(v: &[Vec<f64>]) -> f64 {
    if v.len() < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            sum += cosine(&v[i], &v[j]);
            n += 1;
        }
    }
    sum / n as f64
}

/// Mean silhouette of a two-cluster labelling under cosine distance.
/// Points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mut own, mut own_n, mut other, mut other_n) = (0.0, 0usize, 0.0, 0usize);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = cosine_distance(&points[i], &points[j]);
            if labels[j] == labels[i] {
                own += d;
                own_n += 1;
            } else {
                other += d;
                other_n += 1;
            }
        }
        if own_n == 0 || other_n == 0 {
            continue;
        }
        let a = own / own_n as f64;
        let b = other / other_n as f64;
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Separation statistics over already-pooled vectors.
pub fn separation_of_pooled(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<SeparationReport> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("prompt family"));
    }
    let mut between = 0.0;
    for a in source {
        for b in target {
            between += cosine(a, b);
        }
    }
    between /= (source.len() * target.len()) as f64;
    let mut points = source.to_vec();
    points.extend_from_slice(target);
    let labels: Vec<usize> = (0..points.len())
        .map(|i| usize::from(i >= source.len()))
        .collect();
    Ok(SeparationReport {
        mean_within_source: mean_within(source),
        mean_within_target: mean_within(target),
        mean_between: between,
        silhouette: silhouette(&points, &labels),
        n_source: source.len(),
        n_target: target.len(),
    })
}

/// Pools each embedding over unpadded tokens, then measures separation.
pub fn embedding_separation(
    source: &[ConditioningEmbedding],
    target: &[ConditioningEmbedding],
) -> Result<SeparationReport> {
    let s: Vec<Vec<f64>> = source.iter().map(ConditioningEmbedding::pooled).collect();
    let t: Vec<Vec<f64>> = target.iter().map(ConditioningEmbedding::pooled).collect();
    separation_of_pooled(&s, &t)
}

/// Projects rows onto their top two principal components.
///
/// Component signs are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Empty("pca input"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("pca rows differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut comps = Vec::with_capacity(2);
    for k in 0..2 {
        let mut v: Vec<f64> = match order.get(k) {
            Some(&idx) => eig.eigenvectors.column(idx).iter().copied().collect(),
            None => alloc::vec![0.0; d],
        };
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect())
}
