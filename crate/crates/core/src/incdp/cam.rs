use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Class activation map of one class plus its peak.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    pub heatmap: Array2<f64>,
    /// Peak as (x, y) in map cells; `None` when the map is flat.
    pub argmax: Option<(usize, usize)>,
    /// Peak mapped into patch pixels (cell centre under nearest-neighbour
    /// upscaling), or the patch centre for a flat map.
    pub patch_point: (f64, f64),
}

/// `Σ_k w_k(class) · map_k` over feature maps shaped `K × h × w`.
/// `head_weights` is `classes × K`.
pub fn cam(
    feature_maps: ArrayView3<f64>,
    head_weights: ArrayView2<f64>,
    class_idx: usize,
    patch_size: usize,
) -> Result<Cam> {
    let (k, h, w) = feature_maps.dim();
    if head_weights.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "head has {} inputs but there are {k} feature maps",
            head_weights.ncols()
        )));
    }
    if class_idx >= head_weights.nrows() {
        return Err(Error::LabelOutOfRange {
            label: class_idx,
            classes: head_weights.nrows(),
        });
    }
    let mut heatmap = Array2::<f64>::zeros((h, w));
    for (map, &wk) in feature_maps.outer_iter().zip(head_weights.row(class_idx)) {
        heatmap.scaled_add(wk, &map);
    }
    let (mut lo, mut hi, mut at) = (f64::INFINITY, f64::NEG_INFINITY, (0, 0));
    for ((y, x), &v) in heatmap.indexed_iter() {
        lo = lo.min(v);
        if v > hi {
            hi = v;
            at = (x, y);
        }
    }
    let flat = h * w == 0 || hi - lo <= 1e-12 * hi.abs().max(1.0);
    let half = patch_size as f64 / 2.0;
    let (argmax, patch_point) = if flat {
        (None, (half, half))
    } else {
        let sx = patch_size as f64 / w as f64;
        let sy = patch_size as f64 / h as f64;
        (
            Some(at),
            ((at.0 as f64 + 0.5) * sx, (at.1 as f64 + 0.5) * sy),
        )
    };
    Ok(Cam {
        heatmap,
        argmax,
        patch_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn single_map_passthrough() {
        let maps = Array3::from_shape_fn((1, 3, 4), |(_, y, x)| (y * 4 + x) as f64);
        let c = cam(maps.view(), array![[1.0]].view(), 0, 80).unwrap();
        assert_eq!(c.heatmap, maps.index_axis(ndarray::Axis(0), 0));
    }

    #[test]
    fn flat_map_falls_back_to_centre() {
        let maps = Array3::from_elem((2, 10, 10), 0.7);
        let c = cam(maps.view(), array![[0.5, -1.0], [1.0, 2.0]].view(), 1, 80).unwrap();
        assert_eq!(c.argmax, None);
        assert_eq!(c.patch_point, (40.0, 40.0));
    }

    #[test]
    fn planted_peak() {
        let mut maps = Array3::zeros((2, 10, 10));
        maps[[0, 3, 2]] = 5.0;
        maps[[1, 7, 7]] = 5.0;
        let c = cam(maps.view(), array![[1.0, -0.5]].view(), 0, 80).unwrap();
        assert_eq!(c.argmax, Some((2, 3)));
        assert_eq!(c.patch_point, (20.0, 28.0));
    }

    #[test]
    fn head_mismatch() {
        let maps = Array3::<f64>::zeros((2, 4, 4));
        assert!(cam(maps.view(), array![[1.0]].view(), 0, 80).is_err());
        assert!(cam(maps.view(), array![[1.0, 1.0]].view(), 1, 80).is_err());
    }
}
