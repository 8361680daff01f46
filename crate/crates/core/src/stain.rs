//! Optical-density arithmetic and colour deconvolution for H&E images.
//!
//! Intensities are mapped to absorbance with a base-10 logarithm against a
//! white point of 255 (intensity 0 is clamped to 1 so densities stay finite).
//! Stains mix linearly in that space: a pixel's density row vector is the
//! product of its concentration row vector with a [`StainMatrix`] whose rows
//! are unit absorbance vectors for hematoxylin, eosin and a residual channel.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference hematoxylin absorbance vector (colour deconvolution constants).
pub const HEMATOXYLIN_REF: [f64; 3] = [0.650, 0.704, 0.286];
/// Reference eosin absorbance vector.
pub const EOSIN_REF: [f64; 3] = [0.072, 0.990, 0.105];

/// Largest condition number accepted for a stain basis.
pub const MAX_CONDITION: f64 = 1e6;

const WHITE: f64 = 255.0;

/// 8-bit RGB raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    /// A `width`×`height` image filled with one colour.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::filled(width, height, [255, 255, 255])
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

macro_rules! float_raster {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            width: usize,
            height: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub fn zeros(width: usize, height: usize) -> Self {
                Self { width, height, data: vec![0.0; width * height * 3] }
            }

            pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
                if data.len() != width * height * 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "expected {} values for {width}x{height}x3, got {}",
                        width * height * 3,
                        data.len()
                    )));
                }
                Ok(Self { width, height, data })
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn as_raw(&self) -> &[f64] {
                &self.data
            }

            #[inline]
            pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
                let i = (y * self.width + x) * 3;
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            #[inline]
            pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
                let i = (y * self.width + x) * 3;
                self.data[i..i + 3].copy_from_slice(&v);
            }

            pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
                self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
            }
        }
    };
}

float_raster!(
    /// Per-pixel optical densities (absorbance), three channels.
    OdImage
);
float_raster!(
    /// Per-pixel stain concentrations; channel 0 is hematoxylin.
    ConcentrationMap
);

/// Single-channel floating point raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Three unit absorbance vectors (hematoxylin, eosin, residual) stored as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl StainMatrix {
    /// Builds a basis from three rows. Rows are normalized to unit length;
    /// zero rows or an ill-conditioned basis are rejected.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = [[0.0; 3]; 3];
        for (dst, src) in unit.iter_mut().zip(rows.iter()) {
            *dst = normalized(*src).ok_or_else(|| {
                Error::InvalidStainBasis(format!("zero or non-finite row {src:?}"))
            })?;
        }
        let m = Matrix3::from_fn(|r, c| unit[r][c]);
        let sv = m.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 0.0) || smax / smin >= MAX_CONDITION {
            return Err(Error::InvalidStainBasis(format!(
                "condition number {:.3e} exceeds {MAX_CONDITION:e}",
                smax / smin
            )));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::InvalidStainBasis("singular matrix".into()))?;
        let inverse = [
            [inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]],
            [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]],
            [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]],
        ];
        Ok(Self {
            rows: unit,
            inverse,
        })
    }

    /// Basis from hematoxylin and eosin vectors; the residual row is their
    /// normalized cross product.
    pub fn from_he(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let h = normalized(h).ok_or_else(|| Error::InvalidStainBasis("zero H vector".into()))?;
        let e = normalized(e).ok_or_else(|| Error::InvalidStainBasis("zero E vector".into()))?;
        let r = cross(h, e);
        if norm(r) < 1e-9 {
            return Err(Error::InvalidStainBasis(
                "hematoxylin and eosin vectors are parallel".into(),
            ));
        }
        Self::from_rows([h, e, r])
    }

    /// Builds a basis from nine row-major numbers.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 9 {
            return Err(Error::InvalidStainBasis(format!(
                "expected 9 numbers, got {}",
                values.len()
            )));
        }
        Self::from_rows([
            [values[0], values[1], values[2]],
            [values[3], values[4], values[5]],
            [values[6], values[7], values[8]],
        ])
    }

    pub fn identity() -> Self {
        Self::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            .expect("identity is a valid basis")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.rows[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.rows[1]
    }

    pub fn flat(&self) -> [f64; 9] {
        let r = &self.rows;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }

    /// Row vector `c` times the basis.
    #[inline]
    pub fn mix(&self, c: [f64; 3]) -> [f64; 3] {
        row_times(c, &self.rows)
    }

    /// Row vector `od` times the inverse basis.
    #[inline]
    pub fn unmix(&self, od: [f64; 3]) -> [f64; 3] {
        row_times(od, &self.inverse)
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::from_he(HEMATOXYLIN_REF, EOSIN_REF).expect("reference stain vectors are valid")
    }
}

impl TryFrom<[[f64; 3]; 3]> for StainMatrix {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<StainMatrix> for [[f64; 3]; 3] {
    fn from(m: StainMatrix) -> Self {
        m.rows
    }
}

#[inline]
fn row_times(v: [f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Unit vector along `v`. Vectors already unit to within 1e-12 are returned
/// unchanged, so normalizing is idempotent bit for bit.
pub(crate) fn normalized(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(v);
    if (n - 1.0).abs() < 1e-12 {
        return Some(v);
    }
    (n.is_finite() && n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn intensity_to_od(i: u8) -> f64 {
    -(f64::from(i.max(1)) / WHITE).log10()
}

#[inline]
pub fn od_to_intensity(od: f64) -> u8 {
    (WHITE * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    OdImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| intensity_to_od(v)).collect(),
    }
}

/// Maps densities back to intensities; negative densities saturate at 255.
pub fn od_to_rgb(od: &OdImage) -> RgbImage {
    RgbImage {
        width: od.width,
        height: od.height,
        data: od.data.iter().map(|&v| od_to_intensity(v)).collect(),
    }
}

/// Solves `c · M = od` for every pixel.
pub fn deconvolve(od: &OdImage, m: &StainMatrix) -> ConcentrationMap {
    let mut data = Vec::with_capacity(od.data.len());
    for px in od.pixels() {
        data.extend_from_slice(&m.unmix(px));
    }
    ConcentrationMap {
        width: od.width,
        height: od.height,
        data,
    }
}

/// `od = c · M` per pixel. Negative results are kept.
pub fn recombine(conc: &ConcentrationMap, m: &StainMatrix) -> OdImage {
    let mut data = Vec::with_capacity(conc.data.len());
    for c in conc.pixels() {
        data.extend_from_slice(&m.mix(c));
    }
    OdImage {
        width: conc.width,
        height: conc.height,
        data,
    }
}

/// Hematoxylin concentration per pixel, clamped at zero.
pub fn hematoxylin_channel(img: &RgbImage, m: &StainMatrix) -> ScalarMap {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let od = [
                intensity_to_od(p[0]),
                intensity_to_od(p[1]),
                intensity_to_od(p[2]),
            ];
            m.unmix(od)[0].max(0.0)
        })
        .collect();
    ScalarMap {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Parameters of [`estimate_stain_matrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateParams {
    pub od_floor: f64,
    pub percentile: f64,
}

impl Default for EstimateParams {
    fn default() -> Self {
        Self {
            od_floor: 0.15,
            percentile: 1.0,
        }
    }
}

/// Minimum number of stained pixels required by [`estimate_stain_matrix`].
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Estimates H and E absorbance vectors from the principal plane of the
/// stained pixels' density cloud, taking the angular `percentile` and
/// `100 - percentile` extremes as the pure-stain directions.
pub fn estimate_stain_matrix(img: &RgbImage, od_floor: f64, percentile: f64) -> Result<StainMatrix> {
    let od = rgb_to_od(img);
    let tissue: Vec<[f64; 3]> = od.pixels().filter(|p| norm(*p) > od_floor).collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: tissue.len(),
            needed: MIN_TISSUE_PIXELS,
        });
    }

    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for p in &tissue {
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in &tissue {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 / l1 < 1e-3 {
        return Err(Error::SingleStain);
    }
    let axis = |k: usize| -> [f64; 3] {
        let v = eig.eigenvectors.column(order[k]);
        let v = [v[0], v[1], v[2]];
        // point into the positive-density octant
        if v.iter().sum::<f64>() < 0.0 {
            [-v[0], -v[1], -v[2]]
        } else {
            v
        }
    };
    let (e1, e2) = (axis(0), axis(1));

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|p| {
            let t1 = dot(*p, e1);
            let t2 = dot(*p, e2);
            t2.atan2(t1)
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, percentile);
    let hi = percentile_sorted(&angles, 100.0 - percentile);

    let direction = |phi: f64| -> [f64; 3] {
        let v = [
            e1[0] * phi.cos() + e2[0] * phi.sin(),
            e1[1] * phi.cos() + e2[1] * phi.sin(),
            e1[2] * phi.cos() + e2[2] * phi.sin(),
        ];
        let v = normalized(v).unwrap_or(e1);
        if v.iter().sum::<f64>() < 0.0 {
            [-v[0], -v[1], -v[2]]
        } else {
            v
        }
    };
    let (a, b) = (direction(lo), direction(hi));
    let href = normalized(HEMATOXYLIN_REF).expect("nonzero");
    let (h, e) = if dot(a, href) >= dot(b, href) {
        (a, b)
    } else {
        (b, a)
    };
    StainMatrix::from_he(h, e).map_err(|err| match err {
        Error::InvalidStainBasis(_) => Error::SingleStain,
        other => other,
    })
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Linear-interpolated percentile of an ascending slice.
fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Angle in degrees between two vectors.
pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Deconvolves with `src`, scales each concentration by `gain`, and
/// recombines with `tgt`.
pub fn restain(img: &RgbImage, src: &StainMatrix, tgt: &StainMatrix, gain: [f64; 3]) -> RgbImage {
    map_concentrations(img, src, tgt, |c| {
        [c[0] * gain[0], c[1] * gain[1], c[2] * gain[2]]
    })
}

/// Affine perturbation of stain concentrations: `c' = c * scale + shift`.
pub fn hed_jitter(img: &RgbImage, m: &StainMatrix, scale: [f64; 3], shift: [f64; 3]) -> RgbImage {
    map_concentrations(img, m, m, |c| {
        [
            c[0] * scale[0] + shift[0],
            c[1] * scale[1] + shift[1],
            c[2] * scale[2] + shift[2],
        ]
    })
}

fn map_concentrations(
    img: &RgbImage,
    src: &StainMatrix,
    tgt: &StainMatrix,
    f: impl Fn([f64; 3]) -> [f64; 3],
) -> RgbImage {
    // 256-entry lookup avoids a log10 per channel
    let lut: Vec<f64> = (0..=255u8).map(intensity_to_od).collect();
    let mut out = Vec::with_capacity(img.data.len());
    for p in img.data.chunks_exact(3) {
        let od = [
            lut[p[0] as usize],
            lut[p[1] as usize],
            lut[p[2] as usize],
        ];
        let mixed = tgt.mix(f(src.unmix(od)));
        out.extend(mixed.iter().map(|&v| od_to_intensity(v)));
    }
    RgbImage {
        width: img.width,
        height: img.height,
        data: out,
    }
}

/// Samples HED jitter parameters from a seed: scale ~ U[1-s, 1+s] and
/// shift ~ U[-t, t] per stain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedJitterSampler {
    pub scale_range: f64,
    pub shift_range: f64,
}

impl Default for HedJitterSampler {
    fn default() -> Self {
        Self {
            scale_range: 0.05,
            shift_range: 0.02,
        }
    }
}

impl HedJitterSampler {
    pub fn sample(&self, seed: u64) -> ([f64; 3], [f64; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scale = [1.0; 3];
        let mut shift = [0.0; 3];
        for s in 0..3 {
            if self.scale_range > 0.0 {
                scale[s] = rng.random_range(1.0 - self.scale_range..=1.0 + self.scale_range);
            }
            if self.shift_range > 0.0 {
                shift[s] = rng.random_range(-self.shift_range..=self.shift_range);
            }
        }
        (scale, shift)
    }

    pub fn apply(&self, img: &RgbImage, m: &StainMatrix, seed: u64) -> RgbImage {
        let (scale, shift) = self.sample(seed);
        hed_jitter(img, m, scale, shift)
    }
}

/// Maps an image into one of several stain domains without changing its
/// structure. A learned restaining network can implement this trait.
pub trait Restainer {
    fn domain_count(&self) -> usize;
    fn restain(&self, img: &RgbImage, domain: usize, seed: u64) -> RgbImage;
}

/// Restainer that recombines deconvolved concentrations with the target
/// domain's stain basis, with a random per-call concentration gain.
#[derive(Debug, Clone)]
pub struct StainBasisRestainer {
    pub source: StainMatrix,
    pub targets: Vec<(String, StainMatrix)>,
    /// Half-width of the uniform gain interval around 1 for H and E.
    pub gain_jitter: f64,
}

impl Restainer for StainBasisRestainer {
    fn domain_count(&self) -> usize {
        self.targets.len()
    }

    fn restain(&self, img: &RgbImage, domain: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gain = [1.0; 3];
        if self.gain_jitter > 0.0 {
            for g in gain.iter_mut().take(2) {
                *g = rng.random_range(1.0 - self.gain_jitter..=1.0 + self.gain_jitter);
            }
        }
        restain(img, &self.source, &self.targets[domain].1, gain)
    }
}

/// The three target domains used for stain augmentation by default.
pub fn default_domains() -> Vec<(String, StainMatrix)> {
    [
        ("center_a", [0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581]),
        ("center_b", [0.7000, 0.6500, 0.2960], [0.1500, 0.9800, 0.1300]),
        ("center_c", [0.6200, 0.7500, 0.2300], [0.0500, 0.9500, 0.3000]),
    ]
    .into_iter()
    .map(|(name, h, e)| {
        (
            name.to_string(),
            StainMatrix::from_he(h, e).expect("built-in domains are valid"),
        )
    })
    .collect()
}
