//! Synthetic H&E-like tiles with planted mitoses, look-alikes and ordinary
//! nuclei.
//!
//! Shapes are painted as stain concentrations and pushed through the
//! Beer-Lambert model, so deconvolution recovers them up to 8-bit rounding
//! and the added pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationSet, ImageEntry, Label, PointAnnotation, Split};
use super::Dataset;
use crate::error::{Error, Result};
use crate::stain::{od_to_rgb, recombine, ConcentrationMap, RgbImage, StainMatrix, EOSIN_REF, HEMATOXYLIN_REF};
use crate::Point;

/// Total placement attempts per image before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub images: usize,
    /// The last `test_images` images form the test split.
    pub test_images: usize,
    pub width: usize,
    pub height: usize,
    pub normal_nuclei: usize,
    pub mitoses: usize,
    pub impostors: usize,
    /// Radius range of every planted shape.
    pub radius: (f64, f64),
    pub min_separation: f64,
    /// Fraction of mitoses painted at a fifth of the usual density.
    pub low_intensity_fraction: f64,
    /// Standard deviation of the per-image perturbation of each stain vector
    /// component.
    pub stain_jitter: f64,
    /// Half-width of the per-image stain amount gain around 1.
    pub gain_jitter: f64,
    /// Peak-to-peak pixel noise in intensity levels.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            images: 40,
            test_images: 10,
            width: 400,
            height: 400,
            normal_nuclei: 20,
            mitoses: 5,
            impostors: 5,
            radius: (7.0, 11.0),
            min_separation: 48.0,
            low_intensity_fraction: 0.0,
            stain_jitter: 0.05,
            gain_jitter: 0.1,
            noise: 2,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |arg, reason: String| Err(Error::InvalidArgument { arg, reason });
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("radius", format!("need 0 < min <= max, got ({r0}, {r1})"));
        }
        if self.min_separation <= 2.0 * r1 {
            return bad(
                "min_separation",
                format!("{} does not exceed twice the maximum radius {r1}", self.min_separation),
            );
        }
        if self.test_images > self.images {
            return bad("test_images", format!("{} exceeds image count {}", self.test_images, self.images));
        }
        let margin = 2.0 * r1;
        if (self.width as f64) <= 2.0 * margin || (self.height as f64) <= 2.0 * margin {
            return bad("width", format!("{}x{} is too small for radius {r1}", self.width, self.height));
        }
        if !(0.0..=1.0).contains(&self.low_intensity_fraction) {
            return bad("low_intensity_fraction", format!("{} not in [0, 1]", self.low_intensity_fraction));
        }
        if self.stain_jitter < 0.0 || !(0.0..1.0).contains(&self.gain_jitter) {
            return bad("stain_jitter", "jitter must be non-negative and gain jitter below 1".into());
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index + self.test_images >= self.images {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Nucleus,
    Mitosis { low: bool },
    Impostor,
}

/// One rendered tile with the stain basis it was painted with.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: RgbImage,
    pub stain: StainMatrix,
    pub points: Vec<(Point, Label)>,
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:03}")
}

/// Renders image `index` of the dataset described by `cfg`.
pub fn render_image(cfg: &SyntheticConfig, index: usize) -> Result<RenderedImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let stain = jittered_basis(&mut rng, cfg.stain_jitter)?;
    let (w, h) = (cfg.width, cfg.height);
    let mut hmap = vec![0.0f64; w * h];
    let mut emap = vec![0.0f64; w * h];
    paint_background(&mut rng, w, h, &mut hmap, &mut emap);

    let low = (cfg.mitoses as f64 * cfg.low_intensity_fraction).round() as usize;
    let mut kinds: Vec<Kind> = (0..cfg.mitoses).map(|i| Kind::Mitosis { low: i < low }).collect();
    kinds.extend(std::iter::repeat_n(Kind::Impostor, cfg.impostors));
    kinds.extend(std::iter::repeat_n(Kind::Nucleus, cfg.normal_nuclei));

    let centers = place(&mut rng, cfg, kinds.len())?;
    let mut points = Vec::with_capacity(kinds.len());
    for (&kind, &c) in kinds.iter().zip(&centers) {
        let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let label = match kind {
            Kind::Nucleus => {
                paint_nucleus(&mut rng, c, r, w, h, &mut hmap, &mut emap);
                Label::Nucleus
            }
            Kind::Mitosis { low } => {
                let scale = if low { 0.2 } else { 1.0 };
                paint_mitosis(&mut rng, c, r, scale, w, h, &mut hmap);
                Label::Mitosis
            }
            Kind::Impostor => {
                paint_impostor(&mut rng, c, r, w, h, &mut hmap, &mut emap);
                Label::HardNegative
            }
        };
        points.push((c, label));
    }

    let gain_h = rng.random_range(1.0 - cfg.gain_jitter..=1.0 + cfg.gain_jitter);
    let gain_e = rng.random_range(1.0 - cfg.gain_jitter..=1.0 + cfg.gain_jitter);
    let conc: Vec<f64> = hmap
        .iter()
        .zip(&emap)
        .flat_map(|(&hv, &ev)| [hv * gain_h, ev * gain_e, 0.0])
        .collect();
    let conc = ConcentrationMap::from_raw(w, h, conc)?;
    let mut image = od_to_rgb(&recombine(&conc, &stain));
    if cfg.noise > 0 {
        let n = cfg.noise as i16;
        let mut data = image.into_raw();
        for v in data.iter_mut() {
            *v = (*v as i16 + rng.random_range(-n..=n)).clamp(0, 255) as u8;
        }
        image = RgbImage::from_raw(w, h, data)?;
    }
    Ok(RenderedImage { image, stain, points })
}

/// Generates the whole dataset: images plus point annotations with splits.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut annotations = AnnotationSet::default();
    let mut images = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let r = render_image(cfg, i)?;
        let id = image_id(i);
        annotations.images.push(ImageEntry {
            id: id.clone(),
            file: format!("images/{id}.png"),
            width: cfg.width,
            height: cfg.height,
            split: Some(cfg.split_of(i)),
        });
        for (p, label) in r.points {
            annotations.points.push(PointAnnotation {
                image_id: id.clone(),
                x: p.x,
                y: p.y,
                label,
            });
        }
        images.push(r.image);
    }
    Dataset::new(annotations, images)
}

fn jittered_basis(rng: &mut ChaCha8Rng, sd: f64) -> Result<StainMatrix> {
    if sd == 0.0 {
        return StainMatrix::from_he(HEMATOXYLIN_REF, EOSIN_REF);
    }
    let noise = Normal::new(0.0, sd).expect("finite sd");
    let mut perturb = |v: [f64; 3]| v.map(|c| (c + noise.sample(rng)).max(0.01));
    let h = perturb(HEMATOXYLIN_REF);
    let e = perturb(EOSIN_REF);
    StainMatrix::from_he(h, e)
}

fn place(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, count: usize) -> Result<Vec<Point>> {
    let margin = 2.0 * cfg.radius.1;
    let mut out: Vec<Point> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::InfeasiblePacking {
                wanted: count,
                attempts,
            });
        }
        attempts += 1;
        // integer-plus-half centres sit on pixel centres
        let x = rng.random_range(margin..cfg.width as f64 - margin).floor() + 0.5;
        let y = rng.random_range(margin..cfg.height as f64 - margin).floor() + 0.5;
        let p = Point::new(x, y);
        if out.iter().all(|q| q.distance(&p) >= cfg.min_separation) {
            out.push(p);
        }
    }
    Ok(out)
}

fn paint_background(rng: &mut ChaCha8Rng, w: usize, h: usize, hmap: &mut [f64], emap: &mut [f64]) {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.05),
                rng.random_range(0.01..0.05),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.05),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut e = 0.15;
            for &(fx, fy, phase, amp) in &waves {
                e += amp * (fx * x as f64 + phase).sin() * (fy * y as f64 - phase).cos();
            }
            emap[y * w + x] = e.max(0.02);
            hmap[y * w + x] = rng.random_range(0.0..0.02);
        }
    }
}

/// Soft inside-ness of signed distance `d` (negative inside), 1.5 px ramp.
fn edge(d: f64) -> f64 {
    (0.5 - d / 1.5).clamp(0.0, 1.0)
}

fn bbox(c: Point, reach: f64, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = (c.x - reach).floor().max(0.0) as usize;
    let y0 = (c.y - reach).floor().max(0.0) as usize;
    let x1 = ((c.x + reach).ceil() as usize).min(w - 1);
    let y1 = ((c.y + reach).ceil() as usize).min(h - 1);
    (x0, y0, x1, y1)
}

/// Approximate signed distance to a rotated ellipse centred at the origin.
fn ellipse_sd(dx: f64, dy: f64, a: f64, b: f64, theta: f64) -> f64 {
    let (s, co) = theta.sin_cos();
    let u = dx * co + dy * s;
    let v = -dx * s + dy * co;
    let k = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
    (k - 1.0) * a.min(b)
}

fn blend(map: &mut [f64], i: usize, value: f64, alpha: f64) {
    map[i] = map[i] * (1.0 - alpha) + value * alpha;
}

fn paint_nucleus(rng: &mut ChaCha8Rng, c: Point, r: f64, w: usize, h: usize, hmap: &mut [f64], emap: &mut [f64]) {
    let a = r;
    let b = r * rng.random_range(0.65..0.9);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let density = rng.random_range(0.45..0.65);
    let (x0, y0, x1, y1) = bbox(c, r + 2.0, w, h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let alpha = edge(ellipse_sd(x as f64 + 0.5 - c.x, y as f64 + 0.5 - c.y, a, b, theta));
            if alpha > 0.0 {
                let i = y * w + x;
                let chromatin = 1.0 + rng.random_range(-0.12..0.12);
                blend(hmap, i, density * chromatin, alpha);
                blend(emap, i, 0.08, alpha);
            }
        }
    }
}

/// Dense dumbbell (separating chromosomes) or a spiky elongated plate.
fn paint_mitosis(rng: &mut ChaCha8Rng, c: Point, r: f64, scale: f64, w: usize, h: usize, hmap: &mut [f64]) {
    let density = rng.random_range(0.95..1.3) * scale;
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let dumbbell = rng.random_bool(0.5);
    let spikes = rng.random_range(5..9) as f64;
    let spike_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, co) = theta.sin_cos();
    let (x0, y0, x1, y1) = bbox(c, 1.4 * r + 2.0, w, h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - c.x;
            let dy = y as f64 + 0.5 - c.y;
            let sd = if dumbbell {
                let lobe = 0.55 * r;
                let off = 0.75 * r;
                let l1 = ellipse_sd(dx - off * co, dy - off * s, lobe, lobe, 0.0);
                let l2 = ellipse_sd(dx + off * co, dy + off * s, lobe, lobe, 0.0);
                let bridge = ellipse_sd(dx, dy, off, (0.25 * r).max(2.0), theta);
                l1.min(l2).min(bridge)
            } else {
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                let phi = v.atan2(u);
                let bump = 1.0 + 0.3 * (spikes * phi + spike_phase).sin().abs();
                ellipse_sd(u / bump, v / bump, 1.1 * r, 0.5 * r, 0.0)
            };
            let alpha = edge(sd);
            if alpha > 0.0 {
                let i = y * w + x;
                let grain = 1.0 + rng.random_range(-0.05..0.05);
                hmap[i] = hmap[i].max(density * grain * alpha);
            }
        }
    }
}

/// Apoptotic body: as dense as a mitosis and of similar extent, either one
/// compact round mass or two to three round fragments, with an eosinophilic
/// halo.
fn paint_impostor(rng: &mut ChaCha8Rng, c: Point, r: f64, w: usize, h: usize, hmap: &mut [f64], emap: &mut [f64]) {
    let density = rng.random_range(0.95..1.3);
    let pieces: Vec<(f64, f64, f64)> = if rng.random_bool(0.5) {
        vec![(0.0, 0.0, r * rng.random_range(0.55..0.7))]
    } else {
        let n = rng.random_range(2..=3);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        (0..n)
            .map(|k| {
                let angle = phase + std::f64::consts::TAU * k as f64 / n as f64 + rng.random_range(-0.4..0.4);
                let dist = r * rng.random_range(0.45..0.75);
                (dist * angle.cos(), dist * angle.sin(), r * rng.random_range(0.32..0.42))
            })
            .collect()
    };
    let halo_r = 1.3 * r;
    let (x0, y0, x1, y1) = bbox(c, halo_r + 2.0, w, h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - c.x;
            let dy = y as f64 + 0.5 - c.y;
            let i = y * w + x;
            let halo = edge((dx * dx + dy * dy).sqrt() - halo_r);
            if halo > 0.0 {
                blend(emap, i, 0.4, halo);
            }
            let sd = pieces
                .iter()
                .map(|&(px, py, pr)| ((dx - px).powi(2) + (dy - py).powi(2)).sqrt() - pr)
                .fold(f64::INFINITY, f64::min);
            let alpha = edge(sd);
            if alpha > 0.0 {
                hmap[i] = hmap[i].max(density * alpha);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            images: 2,
            test_images: 1,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_separation() {
        let r = render_image(&small(), 0).unwrap();
        assert_eq!(r.points.len(), 30);
        for (i, a) in r.points.iter().enumerate() {
            for b in &r.points[i + 1..] {
                assert!(a.0.distance(&b.0) >= 36.0);
            }
        }
        let mitoses = r.points.iter().filter(|p| p.1 == Label::Mitosis).count();
        assert_eq!(mitoses, 5);
    }

    #[test]
    fn empty_counts_give_background() {
        let cfg = SyntheticConfig {
            normal_nuclei: 0,
            mitoses: 0,
            impostors: 0,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(ds.annotations.points.is_empty());
        assert_eq!(ds.images.len(), 2);
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.annotations.images[1].split, Some(Split::Test));
    }

    #[test]
    fn impossible_packing_is_reported() {
        let cfg = SyntheticConfig {
            width: 100,
            height: 100,
            normal_nuclei: 50,
            ..small()
        };
        assert!(matches!(render_image(&cfg, 0), Err(Error::InfeasiblePacking { .. })));
    }
}
