use serde::{Deserialize, Serialize};

use super::metrics::{match_detections, prf1, MatchReport, Metrics};
use super::train::TrainedModel;
use super::PipelineConfig;
use crate::data::{Dataset, Label, Split};
use crate::error::Result;
use crate::localize::{crop_patches, extract_candidates, localization_sensitivity};
use crate::stain::{hematoxylin_channel, RgbImage};
use crate::Point;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Detection {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    /// Number of localized candidates that were classified.
    pub candidates: usize,
    pub detections: Vec<Detection>,
}

impl DetectionResult {
    pub fn points(&self) -> Vec<Point> {
        self.detections.iter().map(Detection::point).collect()
    }
}

/// Localize, classify every candidate patch, and place a point at the CAM
/// peak of each patch scoring at least the threshold.
pub fn detect(img: &RgbImage, image_id: &str, model: &TrainedModel, cfg: &PipelineConfig) -> Result<DetectionResult> {
    let size = cfg.patch_size;
    let cands = extract_candidates(&hematoxylin_channel(img, &cfg.stain.source), &cfg.localize);
    let patches = crop_patches(img, image_id, &cands, size);
    let mut detections = Vec::new();
    let (maxx, maxy) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    for patch in &patches {
        let pred = model.classifier.predict(&patch.pixels);
        if pred.pos_prob < cfg.score_threshold {
            continue;
        }
        let cam = model.classifier.cam(&pred, size)?;
        let (px, py) = cam.patch_point;
        let origin = |c: usize| c as f64 - (size / 2) as f64;
        detections.push(Detection {
            x: (origin(patch.center.0) + px).clamp(0.0, maxx),
            y: (origin(patch.center.1) + py).clamp(0.0, maxy),
            score: pred.pos_prob,
        });
    }
    Ok(DetectionResult {
        image_id: image_id.to_string(),
        candidates: cands.len(),
        detections,
    })
}

/// Detections for every image of a split.
pub fn detect_dataset(ds: &Dataset, split: Split, model: &TrainedModel, cfg: &PipelineConfig) -> Result<Vec<DetectionResult>> {
    ds.indices(split)
        .into_iter()
        .map(|i| detect(&ds.images[i], ds.id(i), model, cfg))
        .collect()
}

/// Pools matches over images against the annotated mitoses.
pub fn evaluate(ds: &Dataset, results: &[DetectionResult], radius: f64) -> Result<(Metrics, MatchReport)> {
    let mut total = MatchReport::default();
    for r in results {
        let gt = ds.annotations.points_for(&r.image_id, Some(Label::Mitosis));
        total.accumulate(&match_detections(&r.points(), &gt, radius)?);
    }
    Ok((prf1(&total), total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub mitoses: usize,
    pub covered: usize,
    pub candidates: usize,
    pub sensitivity: f64,
}

/// Fraction of annotated mitoses in `split` with a candidate within `radius`.
pub fn localization_report(ds: &Dataset, split: Split, cfg: &PipelineConfig, radius: f64) -> LocalizationReport {
    let (mut mitoses, mut covered, mut candidates) = (0, 0.0, 0);
    for i in ds.indices(split) {
        let cands = extract_candidates(&hematoxylin_channel(&ds.images[i], &cfg.stain.source), &cfg.localize);
        let gt = ds.points(i, Label::Mitosis);
        covered += localization_sensitivity(&cands, &gt, radius) * gt.len() as f64;
        mitoses += gt.len();
        candidates += cands.len();
    }
    let covered = covered.round() as usize;
    LocalizationReport {
        mitoses,
        covered,
        candidates,
        sensitivity: if mitoses == 0 { 1.0 } else { covered as f64 / mitoses as f64 },
    }
}
