//! Datasets on disk and in memory, the synthetic generator, annotation
//! ingestion and the key=value configuration format.
//!
//! A dataset directory holds `annotations.json` plus the PNG files its
//! image entries name, relative to the directory.

pub mod annotations;
pub mod config;
pub mod synth;

use std::path::Path;

pub use annotations::{
    load_annotations, parse_annotations, AnnotationFormat, AnnotationSet, ImageEntry, Label, PointAnnotation,
    Split,
};
pub use config::Config;
pub use synth::{generate_synthetic, render_image, RenderedImage, SyntheticConfig};

use crate::error::{Error, Result};
use crate::stain::RgbImage;
use crate::Point;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Annotated images, `images[i]` belonging to `annotations.images[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub annotations: AnnotationSet,
    pub images: Vec<RgbImage>,
}

impl Dataset {
    pub fn new(annotations: AnnotationSet, images: Vec<RgbImage>) -> Result<Self> {
        if annotations.images.len() != images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} image entries for {} images",
                annotations.images.len(),
                images.len()
            )));
        }
        for (e, img) in annotations.images.iter().zip(&images) {
            if e.width != img.width() || e.height != img.height() {
                return Err(Error::ShapeMismatch(format!(
                    "image `{}` is {}x{}, annotations say {}x{}",
                    e.id,
                    img.width(),
                    img.height(),
                    e.width,
                    e.height
                )));
            }
        }
        annotations.validate()?;
        Ok(Self { annotations, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.annotations.images[index].id
    }

    /// Indices of images in `split`. Entries without a split count as train.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.annotations
            .images
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split.unwrap_or(Split::Train) == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn points(&self, index: usize, label: Label) -> Vec<Point> {
        self.annotations.points_for(self.id(index), Some(label))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (e, img) in self.annotations.images.iter().zip(&self.images) {
            let path = dir.join(&e.file);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_png(img, &path)?;
        }
        self.annotations.save(&dir.join(ANNOTATIONS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let annotations = load_annotations(&dir.join(ANNOTATIONS_FILE), AnnotationFormat::PointsJson)?;
        let images = annotations
            .images
            .iter()
            .map(|e| read_png(&dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(annotations, images)
    }
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_raw(w as usize, h as usize, img.into_raw())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer_with_format(
        path,
        img.as_raw(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}
