use ndarray::{Array2, ArrayView2};

use super::ChildWeights;
use crate::dgsb::kmeans;
use crate::error::{Error, Result};

/// Child pseudo-labels and the centroid of every child class (`2T × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChildLabels {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
}

/// Splits each parent class into `t` children with k-means. Negative
/// children are numbered `[0, t)`, positive children `[t, 2t)`.
pub fn generate_child_labels(
    features: ArrayView2<f64>,
    parent_labels: &[u8],
    t: usize,
    seed: u64,
) -> Result<ChildLabels> {
    if features.nrows() != parent_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            parent_labels.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument {
            arg: "t",
            reason: "need at least one child per parent".into(),
        });
    }
    let d = features.ncols();
    let mut labels = vec![0usize; parent_labels.len()];
    let mut centroids = Array2::zeros((2 * t, d));
    for parent in [0u8, 1] {
        let members: Vec<usize> = parent_labels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == parent)
            .map(|(i, _)| i)
            .collect();
        if members.len() < t {
            return Err(Error::TooFewSamples(format!(
                "parent class {parent} has {} samples, need at least {t}",
                members.len()
            )));
        }
        let mut sub = Array2::zeros((members.len(), d));
        for (r, &i) in members.iter().enumerate() {
            sub.row_mut(r).assign(&features.row(i));
        }
        let a = kmeans(&sub, t, seed.wrapping_add(parent as u64))?;
        let offset = parent as usize * t;
        for (r, &i) in members.iter().enumerate() {
            labels[i] = offset + a.labels[r];
        }
        for j in 0..t {
            centroids.row_mut(offset + j).assign(&a.centroids.row(j));
        }
    }
    Ok(ChildLabels { labels, centroids })
}

/// Difficulty weights from child centroids: children close to the opposite
/// parent's children weigh more. See [`weights_from_distances`].
pub fn child_weights(child_centroids: ArrayView2<f64>, t: usize, clip: (f64, f64)) -> Result<ChildWeights> {
    if child_centroids.nrows() != 2 * t {
        return Err(Error::ShapeMismatch(format!(
            "expected {} child centroids, got {}",
            2 * t,
            child_centroids.nrows()
        )));
    }
    let dist = (0..2 * t)
        .map(|j| {
            let opposite = if j < t { t..2 * t } else { 0..t };
            opposite
                .map(|k| {
                    child_centroids
                        .row(j)
                        .iter()
                        .zip(child_centroids.row(k).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect::<Vec<_>>();
    Ok(weights_from_distances(&dist, clip))
}

/// `raw_j = mean(d) / d_j` (a zero distance takes `w_max`), then the weights
/// are `clip(s · raw)` with the scale `s` chosen so their mean is exactly 1.
pub fn weights_from_distances(dist: &[f64], clip: (f64, f64)) -> ChildWeights {
    let (lo, hi) = clip;
    let n = dist.len() as f64;
    let mean = dist.iter().sum::<f64>() / n;
    let raw: Vec<f64> = dist
        .iter()
        .map(|&d| if d > 0.0 && mean > 0.0 { mean / d } else if mean > 0.0 { hi } else { 1.0 })
        .map(|r| r.clamp(lo, hi))
        .collect();
    let mean_at = |s: f64| raw.iter().map(|r| (s * r).clamp(lo, hi)).sum::<f64>() / n;
    // mean_at is continuous and non-decreasing in s, from lo to hi
    let (mut a, mut b) = (0.0, 1.0);
    while mean_at(b) < 1.0 {
        b *= 2.0;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if mean_at(m) < 1.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let mut weights: Vec<f64> = raw.iter().map(|r| (b * r).clamp(lo, hi)).collect();
    // absorb the last rounding error into unclipped entries
    let err = weights.iter().sum::<f64>() / n - 1.0;
    let free: Vec<usize> = (0..weights.len())
        .filter(|&i| weights[i] > lo && weights[i] < hi)
        .collect();
    if !free.is_empty() {
        let adj = err * n / free.len() as f64;
        for i in free {
            weights[i] -= adj;
        }
    }
    ChildWeights { weights }
}
