//! Focal, center and joint losses. All sums run over samples, not means.

use ndarray::{Array2, ArrayView2};

use super::{Centers, ChildWeights};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary focal loss over positive-class probabilities.
pub fn focal_loss(pos_probs: &[f64], labels: &[u8], gamma: f64) -> f64 {
    pos_probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                -(1.0 - p).powf(gamma) * p.ln()
            } else {
                -p.powf(gamma) * (1.0 - p).ln()
            }
        })
        .sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / s).collect()
}

/// Focal loss on two-way parent logits `[z_neg, z_pos]`, with the gradient
/// of the summed loss with respect to each logit.
pub fn focal_loss_logits(logits: &[[f64; 2]], labels: &[u8], gamma: f64) -> (f64, Vec<[f64; 2]>) {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        // p = sigmoid(z1 - z0)
        let p = clamp_prob(1.0 / (1.0 + (z[0] - z[1]).exp()));
        let q = 1.0 - p;
        let (loss, dz) = if y == 1 {
            (
                -q.powf(gamma) * p.ln(),
                gamma * p * q.powf(gamma) * p.ln() - q.powf(gamma + 1.0),
            )
        } else {
            (
                -p.powf(gamma) * q.ln(),
                -gamma * p.powf(gamma) * q * q.ln() + p.powf(gamma + 1.0),
            )
        };
        total += loss;
        grads.push([-dz, dz]);
    }
    (total, grads)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// `½ Σ ‖x_i − c_{y_i}‖²`.
pub fn center_loss(features: ArrayView2<f64>, labels: &[usize], centers: &Centers) -> Result<f64> {
    check_labels(labels, centers.classes())?;
    let mut total = 0.0;
    for (x, &y) in features.rows().into_iter().zip(labels) {
        let c = centers.vectors.row(y);
        total += x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(0.5 * total)
}

/// Gradient of [`center_loss`] with respect to the features: `x_i − c_{y_i}`.
pub fn center_loss_grad(
    features: ArrayView2<f64>,
    labels: &[usize],
    centers: &Centers,
) -> Result<Array2<f64>> {
    check_labels(labels, centers.classes())?;
    let mut g = features.to_owned();
    for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
        row -= &centers.vectors.row(y);
    }
    Ok(g)
}

/// Moves each class centre present in the batch towards its members:
/// `c_j ← c_j − α · mean_i (c_j − x_i)`.
pub fn update_centers(
    centers: &Centers,
    features: ArrayView2<f64>,
    labels: &[usize],
    alpha: f64,
) -> Result<Centers> {
    check_labels(labels, centers.classes())?;
    let mut diff = Array2::<f64>::zeros(centers.vectors.raw_dim());
    let mut counts = vec![0usize; centers.classes()];
    for (x, &y) in features.rows().into_iter().zip(labels) {
        let mut d = diff.row_mut(y);
        d += &centers.vectors.row(y);
        d -= &x;
        counts[y] += 1;
    }
    let mut out = centers.clone();
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            let step = &diff.row(j) * (alpha / n as f64);
            let mut c = out.vectors.row_mut(j);
            c -= &step;
        }
    }
    Ok(out)
}

/// Weighted focal loss over child-class probabilities (rows sum to 1);
/// only the true-class term contributes.
pub fn child_focal_loss(
    child_probs: ArrayView2<f64>,
    child_labels: &[usize],
    weights: &ChildWeights,
    gamma: f64,
) -> Result<f64> {
    check_labels(child_labels, child_probs.ncols())?;
    check_labels(child_labels, weights.weights.len())?;
    let mut total = 0.0;
    for (row, &y) in child_probs.rows().into_iter().zip(child_labels) {
        let p = clamp_prob(row[y]);
        total += -weights.weights[y] * (1.0 - p).powf(gamma) * p.ln();
    }
    Ok(total)
}

/// [`child_focal_loss`] on raw child logits, returning the loss and the
/// gradient with respect to the logits.
pub fn child_focal_loss_logits(
    logits: ArrayView2<f64>,
    child_labels: &[usize],
    weights: &ChildWeights,
    gamma: f64,
) -> Result<(f64, Array2<f64>)> {
    check_labels(child_labels, logits.ncols())?;
    check_labels(child_labels, weights.weights.len())?;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, (row, &y)) in logits.rows().into_iter().zip(child_labels).enumerate() {
        let probs = softmax(row.as_slice().expect("contiguous logits"));
        let w = weights.weights[y];
        let p = clamp_prob(probs[y]);
        let q = 1.0 - p;
        total += -w * q.powf(gamma) * p.ln();
        // dL/dp_y * p_y
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p * p.ln()
        };
        let coeff = -w * (q.powf(gamma) - focus);
        for k in 0..probs.len() {
            let delta = if k == y { 1.0 } else { 0.0 };
            grad[[i, k]] = coeff * (delta - probs[k]);
        }
    }
    Ok((total, grad))
}

/// `L_fp + L_cp + λ (L_fc + L_cc)`.
pub fn joint_loss(focal_p: f64, center_p: f64, focal_c: f64, center_c: f64, lambda: f64) -> f64 {
    focal_p + center_p + lambda * (focal_c + center_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn focal_reference_values() {
        let l = focal_loss(&[0.5], &[1], 2.0);
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((0.25 * 2f64.ln() - 0.17329).abs() < 1e-5);
        assert!(focal_loss(&[1.0], &[1], 2.0) < 1e-12);
        assert!(focal_loss(&[0.0], &[0], 2.0) < 1e-12);
    }

    #[test]
    fn focal_logit_gradient_matches_finite_difference() {
        for &(z0, z1, y, gamma) in &[
            (0.3, -0.2, 1u8, 2.0),
            (0.3, -0.2, 0u8, 2.0),
            (-1.0, 2.0, 0u8, 0.5),
            (1.5, 0.1, 1u8, 0.0),
        ] {
            let (_, g) = focal_loss_logits(&[[z0, z1]], &[y], gamma);
            let h = 1e-6;
            let f = |a: f64, b: f64| focal_loss_logits(&[[a, b]], &[y], gamma).0;
            let d0 = (f(z0 + h, z1) - f(z0 - h, z1)) / (2.0 * h);
            let d1 = (f(z0, z1 + h) - f(z0, z1 - h)) / (2.0 * h);
            assert!((g[0][0] - d0).abs() < 1e-6, "{} vs {d0}", g[0][0]);
            assert!((g[0][1] - d1).abs() < 1e-6, "{} vs {d1}", g[0][1]);
        }
    }

    #[test]
    fn center_loss_values() {
        let c = Centers {
            vectors: array![[0.0, 0.0]],
        };
        assert!((center_loss(array![[1.0, 0.0]].view(), &[0], &c).unwrap() - 0.5).abs() < 1e-12);
        let two = center_loss(array![[1.0, 0.0], [0.0, 2.0]].view(), &[0, 0], &c).unwrap();
        assert!((two - 2.5).abs() < 1e-12);
        assert_eq!(center_loss(array![[0.0, 0.0]].view(), &[0], &c).unwrap(), 0.0);
        assert!(matches!(
            center_loss(array![[0.0, 0.0]].view(), &[1], &c),
            Err(Error::LabelOutOfRange { label: 1, classes: 1 })
        ));
    }

    #[test]
    fn center_updates() {
        let c = Centers {
            vectors: array![[0.0, 0.0], [5.0, 5.0]],
        };
        let x = array![[2.0, 0.0]];
        let half = update_centers(&c, x.view(), &[0], 0.5).unwrap();
        assert_eq!(half.vectors, array![[1.0, 0.0], [5.0, 5.0]]);
        assert_eq!(update_centers(&c, x.view(), &[0], 0.0).unwrap(), c);
        assert_eq!(update_centers(&c, x.view(), &[0], 1.0).unwrap().vectors.row(0), x.row(0));
    }

    #[test]
    fn child_focal_values() {
        let w = ChildWeights {
            weights: vec![1.0, 0.0],
        };
        let probs = array![[0.5, 0.5]];
        let l = child_focal_loss(probs.view(), &[0], &w, 2.0).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(child_focal_loss(probs.view(), &[1], &w, 2.0).unwrap(), 0.0);
        let sure = array![[1.0, 0.0]];
        assert!(child_focal_loss(sure.view(), &[0], &w, 2.0).unwrap() < 1e-12);
    }

    #[test]
    fn child_logit_gradient_matches_finite_difference() {
        let w = ChildWeights {
            weights: vec![0.5, 1.5, 1.2, 0.8],
        };
        let z = array![[0.2, -0.4, 1.0, 0.3], [-1.0, 0.5, 0.0, 2.0]];
        let labels = [2usize, 1];
        for &gamma in &[0.0, 1.0, 2.0] {
            let (_, g) = child_focal_loss_logits(z.view(), &labels, &w, gamma).unwrap();
            for i in 0..2 {
                for k in 0..4 {
                    let h = 1e-6;
                    let mut zp = z.clone();
                    zp[[i, k]] += h;
                    let mut zm = z.clone();
                    zm[[i, k]] -= h;
                    let fd = (child_focal_loss_logits(zp.view(), &labels, &w, gamma).unwrap().0
                        - child_focal_loss_logits(zm.view(), &labels, &w, gamma).unwrap().0)
                        / (2.0 * h);
                    assert!((g[[i, k]] - fd).abs() < 1e-6, "gamma {gamma}: {} vs {fd}", g[[i, k]]);
                }
            }
        }
    }

    #[test]
    fn joint_values() {
        assert_eq!(joint_loss(1.0, 2.0, 3.0, 4.0, 0.5), 6.5);
        assert_eq!(joint_loss(1.0, 2.0, 3.0, 4.0, 0.0), 3.0);
        assert_eq!(joint_loss(0.0, 0.0, 0.0, 0.0, 0.5), 0.0);
    }
}
