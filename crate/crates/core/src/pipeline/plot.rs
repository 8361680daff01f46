use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::stain::RgbImage;

/// Projects rows onto their two leading principal components.
pub fn project_2d(features: &Array2<f64>) -> Result<Vec<(f64, f64)>> {
    let (n, d) = features.dim();
    if n < 2 || d == 0 {
        return Err(Error::TooFewSamples(format!("need at least 2 feature rows, got {n}")));
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = features - &mean;
    let x = DMatrix::from_row_iterator(n, d, centered.iter().copied());
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        order
            .get(k)
            .map(|&j| {
                let mut v = eig.eigenvectors.column(j).into_owned();
                // fix the sign so the plot does not flip between runs
                if let Some(big) = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
                    if big < 0.0 {
                        v = -v;
                    }
                }
                v
            })
            .unwrap_or_else(|| nalgebra::DVector::zeros(d))
    };
    let (a0, a1) = (axis(0), axis(1));
    let p0 = &x * a0;
    let p1 = &x * a1;
    Ok((0..n).map(|i| (p0[i], p1[i])).collect())
}

/// Scatter plot of projected features: positives red, negatives blue, on a
/// white `size`×`size` canvas.
pub fn plot_features(features: &Array2<f64>, labels: &[u8], size: usize) -> Result<RgbImage> {
    if labels.len() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.nrows()
        )));
    }
    let pts = project_2d(features)?;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let margin = 8.0;
    let span = (size as f64 - 2.0 * margin).max(1.0);
    let scale = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            margin + (v - lo) / (hi - lo) * span
        } else {
            size as f64 / 2.0
        }
    };
    let mut img = RgbImage::white(size, size);
    // negatives first so positives stay visible on top
    for pass in [0u8, 1] {
        let colour = if pass == 1 { [214, 39, 40] } else { [31, 119, 180] };
        for (&(x, y), _) in pts.iter().zip(labels).filter(|(_, &l)| l == pass) {
            let cx = scale(x, x0, x1).round() as isize;
            let cy = (size as f64 - scale(y, y0, y1)).round() as isize;
            for dy in -2..=2isize {
                for dx in -2..=2isize {
                    let (px, py) = (cx + dx, cy + dy);
                    if dx * dx + dy * dy <= 4 && px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                        img.set(px as usize, py as usize, colour);
                    }
                }
            }
        }
    }
    Ok(img)
}
