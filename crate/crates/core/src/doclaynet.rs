//! Remapping of an external COCO-style layout dataset onto [`LayoutClass`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{LayoutClass, PageAnnotation, PageRef, Region};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// The eleven categories of the external layout dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExternalCategory {
    Caption,
    Footnote,
    Formula,
    #[serde(rename = "List-item")]
    ListItem,
    #[serde(rename = "Page-footer")]
    PageFooter,
    #[serde(rename = "Page-header")]
    PageHeader,
    Picture,
    #[serde(rename = "Section-header")]
    SectionHeader,
    Table,
    Text,
    Title,
}

impl ExternalCategory {
    pub const ALL: [ExternalCategory; 11] = [
        ExternalCategory::Caption,
        ExternalCategory::Footnote,
        ExternalCategory::Formula,
        ExternalCategory::ListItem,
        ExternalCategory::PageFooter,
        ExternalCategory::PageHeader,
        ExternalCategory::Picture,
        ExternalCategory::SectionHeader,
        ExternalCategory::Table,
        ExternalCategory::Text,
        ExternalCategory::Title,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExternalCategory::Caption => "Caption",
            ExternalCategory::Footnote => "Footnote",
            ExternalCategory::Formula => "Formula",
            ExternalCategory::ListItem => "List-item",
            ExternalCategory::PageFooter => "Page-footer",
            ExternalCategory::PageHeader => "Page-header",
            ExternalCategory::Picture => "Picture",
            ExternalCategory::SectionHeader => "Section-header",
            ExternalCategory::Table => "Table",
            ExternalCategory::Text => "Text",
            ExternalCategory::Title => "Title",
        }
    }
}

impl fmt::Display for ExternalCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExternalCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| s.to_string())
    }
}

/// Target of a remap rule: a layout class or removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemapTarget {
    Keep(LayoutClass),
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapRule {
    table: BTreeMap<ExternalCategory, RemapTarget>,
}

impl RemapRule {
    pub fn from_entries(entries: impl IntoIterator<Item = (ExternalCategory, RemapTarget)>) -> Self {
        Self { table: entries.into_iter().collect() }
    }

    pub fn target(&self, category: ExternalCategory) -> Option<RemapTarget> {
        self.table.get(&category).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ExternalCategory, RemapTarget)> + '_ {
        self.table.iter().map(|(k, v)| (*k, *v))
    }
}

/// Body-like categories merge into Text; Picture, Title and Table are kept;
/// Formula and running headers/footers are removed.
pub fn default_remap() -> RemapRule {
    use ExternalCategory as E;
    use LayoutClass as L;
    RemapRule::from_entries(ExternalCategory::ALL.into_iter().map(|c| {
        let t = match c {
            E::Caption | E::Footnote | E::ListItem | E::SectionHeader | E::Text => RemapTarget::Keep(L::Text),
            E::Picture => RemapTarget::Keep(L::Picture),
            E::Title => RemapTarget::Keep(L::Title),
            E::Table => RemapTarget::Keep(L::Table),
            E::Formula | E::PageFooter | E::PageHeader => RemapTarget::Drop,
        };
        (c, t)
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default)]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    /// Top-left `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Error)]
pub enum RemapError {
    #[error("invalid COCO JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("category '{0}' has no remap rule")]
    UnmappedCategory(String),
    #[error("annotation references unknown category id {0}")]
    UnknownCategoryId(u64),
    #[error("annotation references unknown image id {0}")]
    UnknownImage(u64),
    #[error("image {0} has non-positive size")]
    BadImageSize(u64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapReport {
    pub input_count: usize,
    pub output_count: usize,
    pub dropped_by_category: BTreeMap<String, usize>,
    /// Boxes with zero width or height after clipping to the image.
    pub degenerate_count: usize,
}

impl RemapReport {
    pub fn dropped_total(&self) -> usize {
        self.dropped_by_category.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemappedImage<T> {
    pub image_id: u64,
    pub file_name: String,
    pub annotation: PageAnnotation<T>,
}

impl<T> RemappedImage<T> {
    /// Label file name matching the image basename.
    pub fn label_file_name(&self) -> String {
        format!("{}.txt", self.annotation.page.doc_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemapOutput<T> {
    /// One entry per input image, in input order; images with no surviving
    /// boxes are kept with empty annotations.
    pub images: Vec<RemappedImage<T>>,
    pub report: RemapReport,
}

pub fn parse_coco(json: &str) -> Result<CocoDocument, RemapError> {
    Ok(serde_json::from_str(json)?)
}

/// Converts one top-left pixel box to a normalized center box, clipping to
/// the image. `None` when nothing of positive area remains.
pub fn coco_to_normalized<T: Scalar>(bbox: [f64; 4], width: f64, height: f64) -> Option<BBox<T>> {
    let [x, y, w, h] = bbox;
    let x0 = x.clamp(0.0, width);
    let y0 = y.clamp(0.0, height);
    let x1 = (x + w).clamp(0.0, width);
    let y1 = (y + h).clamp(0.0, height);
    if !(x1 > x0 && y1 > y0) {
        return None;
    }
    BBox::from_corners(T::lit(x0 / width), T::lit(y0 / height), T::lit(x1 / width), T::lit(y1 / height)).ok()
}

/// Applies `rule` to every annotation. Page identities use the image file
/// stem as `doc_id` and page number 1.
pub fn remap_dataset<T: Scalar>(coco: &CocoDocument, rule: &RemapRule) -> Result<RemapOutput<T>, RemapError> {
    let mut categories: HashMap<u64, ExternalCategory> = HashMap::new();
    for c in &coco.categories {
        let ext: ExternalCategory = c.name.parse().map_err(RemapError::UnmappedCategory)?;
        if rule.target(ext).is_none() {
            return Err(RemapError::UnmappedCategory(c.name.clone()));
        }
        categories.insert(c.id, ext);
    }
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut images = Vec::with_capacity(coco.images.len());
    for img in &coco.images {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(RemapError::BadImageSize(img.id));
        }
        index.insert(img.id, images.len());
        let stem = Path::new(&img.file_name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| img.id.to_string());
        images.push(RemappedImage {
            image_id: img.id,
            file_name: img.file_name.clone(),
            annotation: PageAnnotation { page: PageRef::new(stem, 1), regions: Vec::new() },
        });
    }

    let mut report = RemapReport { input_count: coco.annotations.len(), ..Default::default() };
    for ann in &coco.annotations {
        let ext = *categories.get(&ann.category_id).ok_or(RemapError::UnknownCategoryId(ann.category_id))?;
        let slot = *index.get(&ann.image_id).ok_or(RemapError::UnknownImage(ann.image_id))?;
        let class = match rule.target(ext).expect("every category checked above") {
            RemapTarget::Drop => {
                *report.dropped_by_category.entry(ext.name().to_string()).or_default() += 1;
                continue;
            }
            RemapTarget::Keep(class) => class,
        };
        let img = &coco.images[slot];
        match coco_to_normalized::<T>(ann.bbox, img.width, img.height) {
            Some(bbox) => {
                images[slot].annotation.regions.push(Region { class, bbox });
                report.output_count += 1;
            }
            None => {
                log::warn!("dropping degenerate box {:?} on image {}", ann.bbox, img.id);
                report.degenerate_count += 1;
            }
        }
    }
    Ok(RemapOutput { images, report })
}
