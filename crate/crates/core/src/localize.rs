//! Annotation-free nucleus candidates from the hematoxylin channel.

use serde::{Deserialize, Serialize};

use crate::stain::{RgbImage, ScalarMap};
use crate::Point;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMethod {
    /// Otsu's threshold over the nonzero values of the map.
    Otsu,
    /// Fixed hematoxylin concentration.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub threshold: ThresholdMethod,
    pub min_area: usize,
    pub max_area: usize,
    pub open_radius: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMethod::Otsu,
            min_area: 30,
            max_area: 3000,
            open_radius: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusCandidate {
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    pub mean_od: f64,
}

impl NucleusCandidate {
    pub fn point(&self) -> Point {
        Point::new(self.cx, self.cy)
    }
}

/// A square crop centred on a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: RgbImage,
    pub source_image_id: String,
    /// Integer pixel the crop is centred on; it sits at `(size/2, size/2)`.
    pub center: (usize, usize),
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.width()
    }
}

/// Otsu's threshold over the strictly positive entries of `values`.
/// Returns `None` when there are none.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let max = values.iter().copied().filter(|v| *v > 0.0).fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let mut hist = [0u64; BINS];
    let mut total = 0u64;
    for &v in values.iter().filter(|v| **v > 0.0) {
        let b = ((v / max) * (BINS - 1) as f64).round() as usize;
        hist[b.min(BINS - 1)] += 1;
        total += 1;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::MIN, 0usize);
    for (i, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += i as f64 * h as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, i);
        }
    }
    // foreground is strictly above the upper edge of the best bin
    Some((best.1 as f64 + 0.5) / (BINS - 1) as f64 * max)
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Erosion (`all`) or dilation (any) with a disk; outside the image counts
/// as background.
fn morph(mask: &[bool], w: usize, h: usize, offsets: &[(isize, isize)], erode: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let hit = |&(dx, dy): &(isize, isize)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < w
                    && (ny as usize) < h
                    && mask[ny as usize * w + nx as usize]
            };
            out[y * w + x] = if erode {
                offsets.iter().all(hit)
            } else {
                offsets.iter().any(hit)
            };
        }
    }
    out
}

pub fn binarize(hmap: &ScalarMap, method: ThresholdMethod) -> Vec<bool> {
    let t = match method {
        ThresholdMethod::Otsu => match otsu_threshold(&hmap.data) {
            Some(t) => t,
            None => return vec![false; hmap.data.len()],
        },
        ThresholdMethod::Fixed(t) => t,
    };
    hmap.data.iter().map(|&v| v > t && v > 0.0).collect()
}

/// 8-connected component labelling. Returns per-pixel labels (0 = background)
/// and the number of components.
pub fn label_components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Binarize, open, label, filter by area; centroids sorted by `(cy, cx)`.
pub fn extract_candidates(hmap: &ScalarMap, cfg: &LocalizeConfig) -> Vec<NucleusCandidate> {
    let (w, h) = (hmap.width, hmap.height);
    let mut mask = binarize(hmap, cfg.threshold);
    if cfg.open_radius > 0 {
        let disk = disk_offsets(cfg.open_radius);
        mask = morph(&mask, w, h, &disk, true);
        mask = morph(&mask, w, h, &disk, false);
    }
    let (labels, n) = label_components(&mask, w, h);

    #[derive(Default, Clone)]
    struct Acc {
        area: usize,
        sx: f64,
        sy: f64,
        sod: f64,
    }
    let mut acc = vec![Acc::default(); n + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let a = &mut acc[l as usize];
        a.area += 1;
        a.sx += (i % w) as f64;
        a.sy += (i / w) as f64;
        a.sod += hmap.data[i];
    }
    let mut out: Vec<NucleusCandidate> = acc
        .into_iter()
        .skip(1)
        .filter(|a| a.area >= cfg.min_area && a.area <= cfg.max_area)
        .map(|a| NucleusCandidate {
            cx: a.sx / a.area as f64,
            cy: a.sy / a.area as f64,
            area: a.area,
            mean_od: a.sod / a.area as f64,
        })
        .collect();
    out.sort_by(|a, b| a.cy.total_cmp(&b.cy).then(a.cx.total_cmp(&b.cx)));
    out
}

/// Reflect an index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `size`×`size` crop whose pixel `(size/2, size/2)` is `(cx, cy)`.
pub fn crop_at(img: &RgbImage, cx: usize, cy: usize, size: usize) -> RgbImage {
    let half = (size / 2) as isize;
    let mut out = Vec::with_capacity(size * size * 3);
    for py in 0..size as isize {
        let sy = reflect(cy as isize - half + py, img.height());
        for px in 0..size as isize {
            let sx = reflect(cx as isize - half + px, img.width());
            out.extend_from_slice(&img.get(sx, sy));
        }
    }
    RgbImage::from_raw(size, size, out).expect("crop buffer has the right length")
}

/// Crops a patch around every candidate (centroids rounded to the nearest
/// pixel), reflect-padding at the borders.
pub fn crop_patches(
    img: &RgbImage,
    image_id: &str,
    cands: &[NucleusCandidate],
    size: usize,
) -> Vec<Patch> {
    assert!(size >= 16 && size % 2 == 0, "patch size must be even and >= 16");
    cands
        .iter()
        .map(|c| {
            let cx = (c.cx.round() as usize).min(img.width() - 1);
            let cy = (c.cy.round() as usize).min(img.height() - 1);
            Patch {
                pixels: crop_at(img, cx, cy, size),
                source_image_id: image_id.to_string(),
                center: (cx, cy),
            }
        })
        .collect()
}

/// Fraction of ground-truth points with a candidate within `radius`.
/// An empty ground truth counts as fully covered.
pub fn localization_sensitivity(cands: &[NucleusCandidate], gt: &[Point], radius: f64) -> f64 {
    if gt.is_empty() {
        return 1.0;
    }
    let covered = gt
        .iter()
        .filter(|g| cands.iter().any(|c| c.point().distance(g) <= radius))
        .count();
    covered as f64 / gt.len() as f64
}
