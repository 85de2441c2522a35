//! COCO-format annotation ingest/export and detection-results parsing.
//!
//! Annotations use the standard layout: `images[{id, width, height}]`,
//! `annotations[{id, image_id, category_id, bbox: [x, y, w, h]}]`,
//! `categories[{id, name}]`. Category ids may be sparse; internally they are
//! remapped to contiguous indices in id order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, GroundTruth};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: i64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    #[serde(default)]
    pub name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One detection result row; `level`/`cell` are optional and inferred
/// downstream when absent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: i64,
    pub category_id: i64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<(usize, usize)>,
}

/// In-memory dataset with contiguous category indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<DatasetImage>,
    /// Original COCO category `(id, name)` pairs, sorted by id; the position
    /// in this list is the internal category index.
    pub categories: Vec<(i64, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetImage {
    pub id: i64,
    pub width: f64,
    pub height: f64,
    pub gts: Vec<GroundTruth>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, coco_id: i64) -> Option<usize> {
        self.categories.iter().position(|&(id, _)| id == coco_id)
    }

    pub fn image(&self, id: i64) -> Option<&DatasetImage> {
        self.images.iter().find(|im| im.id == id)
    }
}

/// Converts a parsed COCO dataset into the internal corner-form layout.
pub fn ingest(raw: &CocoDataset) -> Result<Dataset> {
    let mut categories: BTreeMap<i64, String> = raw
        .categories
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect();
    // tolerate annotations referencing categories missing from the list
    for ann in &raw.annotations {
        categories.entry(ann.category_id).or_default();
    }
    let categories: Vec<(i64, String)> = categories.into_iter().collect();

    let mut images: Vec<DatasetImage> = raw
        .images
        .iter()
        .map(|im| DatasetImage {
            id: im.id,
            width: im.width,
            height: im.height,
            gts: Vec::new(),
        })
        .collect();

    for ann in &raw.annotations {
        let [x, y, w, h] = ann.bbox;
        if w < 0.0 || h < 0.0 {
            return Err(Error::invalid(format!(
                "annotation {} has negative bbox size",
                ann.id
            )));
        }
        let category = categories
            .iter()
            .position(|&(id, _)| id == ann.category_id)
            .expect("category inserted above");
        let image = images
            .iter_mut()
            .find(|im| im.id == ann.image_id)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                ))
            })?;
        image.gts.push(GroundTruth {
            category,
            bbox: BBox::from_xywh(x, y, w, h),
            id: ann.id,
        });
    }
    Ok(Dataset { images, categories })
}

/// Inverse of [`ingest`].
pub fn export(dataset: &Dataset) -> CocoDataset {
    let images = dataset
        .images
        .iter()
        .map(|im| CocoImage {
            id: im.id,
            width: im.width,
            height: im.height,
        })
        .collect();
    let mut annotations = Vec::new();
    for im in &dataset.images {
        for gt in &im.gts {
            let [x, y, w, h] = gt.bbox.to_xywh();
            annotations.push(CocoAnnotation {
                id: gt.id,
                image_id: im.id,
                category_id: dataset.categories[gt.category].0,
                bbox: [x, y, w, h],
            });
        }
    }
    let categories = dataset
        .categories
        .iter()
        .map(|(id, name)| CocoCategory {
            id: *id,
            name: name.clone(),
        })
        .collect();
    CocoDataset {
        images,
        annotations,
        categories,
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let raw: CocoDataset = serde_json::from_str(&text)?;
    ingest(&raw)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let raw = export(dataset);
    std::fs::write(path, serde_json::to_string_pretty(&raw)?)?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

/// Converts a record to an internal detection given the dataset's category
/// map and an inferred or explicit pyramid placement.
pub fn record_to_detection(
    record: &DetectionRecord,
    dataset: &Dataset,
    level: usize,
    cell: (usize, usize),
) -> Result<Detection> {
    let category = dataset.category_index(record.category_id).ok_or_else(|| {
        Error::invalid(format!(
            "detection references unknown category {}",
            record.category_id
        ))
    })?;
    let [x, y, w, h] = record.bbox;
    if w < 0.0 || h < 0.0 {
        return Err(Error::invalid("detection bbox has negative size"));
    }
    Ok(Detection {
        bbox: BBox::from_xywh(x, y, w, h),
        score: record.score,
        category,
        level,
        cell,
    })
}
