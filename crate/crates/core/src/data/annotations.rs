//! Point annotations in a minimal JSON schema.
//!
//! ```json
//! {
//!   "images": [{"id": "img_000", "file": "images/img_000.png", "width": 320, "height": 320, "split": "train"}],
//!   "points": [{"image_id": "img_000", "x": 41.5, "y": 77.0, "label": "mitosis"}]
//! }
//! ```
//!
//! The box flavour replaces `points` with `boxes` entries carrying
//! `x, y, w, h` (top-left corner and size); they are reduced to centres.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Mitosis,
    /// A mitosis look-alike (apoptotic body, dark fragment).
    HardNegative,
    /// An ordinary nucleus.
    Nucleus,
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mitosis" => Ok(Label::Mitosis),
            "hard_negative" => Ok(Label::HardNegative),
            "nucleus" => Ok(Label::Nucleus),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Mitosis => "mitosis",
            Label::HardNegative => "hard_negative",
            Label::Nucleus => "nucleus",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub label: Label,
}

impl PointAnnotation {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageEntry>,
    pub points: Vec<PointAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    PointsJson,
    BoxesJson,
}

impl FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points_json" | "points" => Ok(Self::PointsJson),
            "boxes_json" | "boxes" => Ok(Self::BoxesJson),
            other => Err(Error::InvalidArgument {
                arg: "format",
                reason: format!("unknown annotation format `{other}`"),
            }),
        }
    }
}

#[derive(Deserialize)]
struct RawPoint {
    image_id: String,
    x: f64,
    y: f64,
    label: String,
}

#[derive(Deserialize)]
struct RawBox {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    label: String,
}

#[derive(Deserialize)]
struct RawPoints {
    #[serde(default)]
    images: Vec<ImageEntry>,
    #[serde(default)]
    points: Vec<RawPoint>,
}

#[derive(Deserialize)]
struct RawBoxes {
    #[serde(default)]
    images: Vec<ImageEntry>,
    #[serde(default)]
    boxes: Vec<RawBox>,
}

impl AnnotationSet {
    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }

    /// Points of one image, optionally restricted to one label.
    pub fn points_for(&self, image_id: &str, label: Option<Label>) -> Vec<Point> {
        self.points
            .iter()
            .filter(|p| p.image_id == image_id && label.is_none_or(|l| p.label == l))
            .map(PointAnnotation::point)
            .collect()
    }

    /// Checks id uniqueness and that every point lies inside its image.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.images {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidArgument {
                    arg: "images",
                    reason: format!("duplicate image id `{}`", e.id),
                });
            }
        }
        for p in &self.points {
            let img = self.image(&p.image_id).ok_or_else(|| Error::InvalidArgument {
                arg: "points",
                reason: format!("point refers to unknown image `{}`", p.image_id),
            })?;
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < img.width as f64 && p.y < img.height as f64;
            if !inside {
                return Err(Error::OutOfBounds {
                    image_id: p.image_id.clone(),
                    x: p.x,
                    y: p.y,
                    width: img.width,
                    height: img.height,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Parses an annotation document from text.
pub fn parse_annotations(text: &str, format: AnnotationFormat, origin: &Path) -> Result<AnnotationSet> {
    let malformed = |e: serde_json::Error| Error::MalformedAnnotations {
        path: origin.to_path_buf(),
        reason: e.to_string(),
    };
    let set = match format {
        AnnotationFormat::PointsJson => {
            let raw: RawPoints = serde_json::from_str(text).map_err(malformed)?;
            let points = raw
                .points
                .into_iter()
                .map(|p| {
                    Ok(PointAnnotation {
                        label: p.label.parse()?,
                        image_id: p.image_id,
                        x: p.x,
                        y: p.y,
                    })
                })
                .collect::<Result<_>>()?;
            AnnotationSet {
                images: raw.images,
                points,
            }
        }
        AnnotationFormat::BoxesJson => {
            let raw: RawBoxes = serde_json::from_str(text).map_err(malformed)?;
            let points = raw
                .boxes
                .into_iter()
                .map(|b| {
                    Ok(PointAnnotation {
                        label: b.label.parse()?,
                        image_id: b.image_id,
                        x: b.x + b.w / 2.0,
                        y: b.y + b.h / 2.0,
                    })
                })
                .collect::<Result<_>>()?;
            AnnotationSet {
                images: raw.images,
                points,
            }
        }
    };
    set.validate()?;
    Ok(set)
}

pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<AnnotationSet> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text, format, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ORIGIN: &str = "test.json";

    fn image_json() -> &'static str {
        r#"[{"id": "a", "file": "a.png", "width": 100, "height": 80}]"#
    }

    #[test]
    fn boxes_reduce_to_centres() {
        let text = format!(
            r#"{{"images": {}, "boxes": [{{"image_id": "a", "x": 10, "y": 20, "w": 30, "h": 40, "label": "mitosis"}}]}}"#,
            image_json()
        );
        let set = parse_annotations(&text, AnnotationFormat::BoxesJson, Path::new(ORIGIN)).unwrap();
        assert_eq!(set.points[0].point(), Point::new(25.0, 40.0));
    }

    #[test]
    fn empty_list_is_fine() {
        let text = format!(r#"{{"images": {}, "points": []}}"#, image_json());
        let set = parse_annotations(&text, AnnotationFormat::PointsJson, Path::new(ORIGIN)).unwrap();
        assert!(set.points.is_empty());
    }

    #[test]
    fn error_kinds() {
        let oob = format!(
            r#"{{"images": {}, "points": [{{"image_id": "a", "x": -1, "y": 5, "label": "mitosis"}}]}}"#,
            image_json()
        );
        assert!(matches!(
            parse_annotations(&oob, AnnotationFormat::PointsJson, Path::new(ORIGIN)),
            Err(Error::OutOfBounds { .. })
        ));
        let unknown = format!(
            r#"{{"images": {}, "points": [{{"image_id": "a", "x": 1, "y": 5, "label": "blob"}}]}}"#,
            image_json()
        );
        assert!(matches!(
            parse_annotations(&unknown, AnnotationFormat::PointsJson, Path::new(ORIGIN)),
            Err(Error::UnknownLabel(_))
        ));
        assert!(matches!(
            parse_annotations("{not json", AnnotationFormat::PointsJson, Path::new(ORIGIN)),
            Err(Error::MalformedAnnotations { .. })
        ));
        assert!(matches!(
            load_annotations(Path::new("/nonexistent/annotations.json"), AnnotationFormat::PointsJson),
            Err(Error::MissingFile(_))
        ));
    }
}
