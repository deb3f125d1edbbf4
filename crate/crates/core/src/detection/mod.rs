//! Layout detection behind a backend contract, the two training
//! strategies, confidence filtering and crop extraction.

mod blob;
mod command;
mod stub;

pub use blob::{BlobDetector, BlobDetectorParams};
pub use command::CommandDetector;
pub use stub::StubDetector;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{parse_labels, LayoutClass, PageAnnotation, PageRef};
use crate::command::CommandError;
use crate::corpus::PageImage;
use crate::geometry::{BBox, GeometryError, PixelRect};
use crate::scalar::{cmp_scalar, Scalar};

/// A predicted region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub class: LayoutClass,
    pub bbox: BBox<T>,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.bbox.validate()?;
        if !(self.confidence >= T::zero() && self.confidence <= T::one()) {
            return Err(GeometryError::OutOfRange { field: "confidence", value: self.confidence.to_f64_lossy() });
        }
        Ok(())
    }
}

/// Detections of one page; also the on-disk format of detector outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageDetections {
    pub doc_id: String,
    pub page_number: u32,
    pub detections: Vec<Detection<f64>>,
}

impl PageDetections {
    pub fn page_ref(&self) -> PageRef {
        PageRef::new(self.doc_id.clone(), self.page_number)
    }
}

/// Keeps detections with `confidence >= threshold`, preserving order.
pub fn filter_detections<T: Scalar>(dets: &[Detection<T>], threshold: T) -> Vec<Detection<T>> {
    dets.iter().filter(|d| d.confidence >= threshold).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingStrategy {
    /// Train on the external layout dataset, then fine-tune on the custom set.
    PretrainThenFinetune,
    /// Train on the custom set only.
    CustomOnly,
}

impl TrainingStrategy {
    /// 1 for pretrain-then-finetune, 2 for custom-only.
    pub fn number(self) -> u8 {
        match self {
            TrainingStrategy::PretrainThenFinetune => 1,
            TrainingStrategy::CustomOnly => 2,
        }
    }
}

impl fmt::Display for TrainingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingStrategy::PretrainThenFinetune => "pretrain-then-finetune",
            TrainingStrategy::CustomOnly => "custom-only",
        })
    }
}

impl FromStr for TrainingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain-then-finetune" | "1" => Ok(TrainingStrategy::PretrainThenFinetune),
            "custom-only" | "2" => Ok(TrainingStrategy::CustomOnly),
            other => Err(format!("unknown training strategy '{other}'")),
        }
    }
}

pub type Hyperparams = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub trainable: bool,
    pub model_name: String,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error("unparseable backend output: {0}")]
    Output(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("model has not been trained")]
    Untrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Pretrain,
    Finetune,
    Train,
}

/// One training pass over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPhase {
    pub index: usize,
    pub kind: PhaseKind,
    pub dataset_id: String,
    pub samples: usize,
    pub hyperparams: Hyperparams,
}

/// Provenance line written per training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub model_name: String,
    pub strategy: TrainingStrategy,
    #[serde(flatten)]
    pub phase: TrainingPhase,
}

/// Adapter over a concrete layout detector.
///
/// `predict` must be deterministic for a fixed trained state and input.
pub trait DetectorBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    fn train(&mut self, phase: &TrainingPhase, data: &DetectionDataset, hyperparams: &Hyperparams) -> Result<(), BackendError>;

    fn predict(&self, page: &PageImage, image: &RgbImage) -> Result<Vec<Detection<f64>>, BackendError>;

    /// Persists the trained state so it can be reloaded from `weights_path`.
    fn save(&self, _path: &Path) -> Result<(), BackendError> {
        Err(BackendError::Unsupported(format!("{} cannot save its state", self.capabilities().model_name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPage {
    pub page: PageImage,
    pub annotation: PageAnnotation<f64>,
}

/// Pages with ground truth, usually an `images/` + `labels/` directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    pub id: String,
    pub root: Option<PathBuf>,
    pub samples: Vec<LabeledPage>,
}

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("backend '{0}' is not trainable")]
    NotTrainable(String),
    #[error("training phase {phase} failed: {source}")]
    Training { phase: usize, source: BackendError },
    #[error("detection failed on page {page}: {source}")]
    Backend { page: PageRef, source: BackendError },
    #[error("backend returned an invalid detection on page {page}: {source}")]
    InvalidDetection { page: PageRef, source: GeometryError },
    #[error("cannot read raster {path}: {message}")]
    Raster { path: PathBuf, message: String },
    #[error("dataset {path}: {message}")]
    Dataset { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl DetectionDataset {
    /// Loads `dir/images/*.png` with labels from `dir/labels/<stem>.txt`.
    ///
    /// A page without a label file has no regions. Page identity is the
    /// image stem as `doc_id`, or `<doc_id>_pNNNN` split back apart when
    /// the stem follows the corpus naming scheme.
    pub fn load_dir(dir: &Path) -> Result<Self, DetectionError> {
        let images_dir = dir.join("images");
        let labels_dir = dir.join("labels");
        let mut paths: Vec<PathBuf> = fs::read_dir(&images_dir)
            .map_err(|source| DetectionError::Io { path: images_dir.clone(), source })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png") || x.eq_ignore_ascii_case("jpg")))
            .collect();
        paths.sort();
        let mut samples = Vec::with_capacity(paths.len());
        for path in paths {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let page_ref = page_ref_from_stem(&stem);
            let (w, h) = image::image_dimensions(&path)
                .map_err(|e| DetectionError::Raster { path: path.clone(), message: e.to_string() })?;
            let label_path = labels_dir.join(format!("{stem}.txt"));
            let annotation = match fs::read_to_string(&label_path) {
                Ok(text) => parse_labels(&text, &page_ref)
                    .map_err(|e| DetectionError::Dataset { path: label_path.clone(), message: e.to_string() })?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => PageAnnotation::empty(page_ref.clone()),
                Err(source) => return Err(DetectionError::Io { path: label_path, source }),
            };
            samples.push(LabeledPage {
                page: PageImage { doc_id: page_ref.doc_id, page_number: page_ref.page_number, width_px: w, height_px: h, path },
                annotation,
            });
        }
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        Ok(Self { id, root: Some(dir.to_path_buf()), samples })
    }
}

/// `<doc>_p0007` → (`doc`, 7); anything else → (stem, 1).
pub fn page_ref_from_stem(stem: &str) -> PageRef {
    if let Some((doc, num)) = stem.rsplit_once("_p") {
        if !doc.is_empty() && num.len() >= 4 && num.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(n) = num.parse::<u32>() {
                return PageRef::new(doc, n);
            }
        }
    }
    PageRef::new(stem, 1)
}

/// A detector whose training (if any) is finished.
pub struct TrainedDetector {
    backend: Box<dyn DetectorBackend>,
    pub log: Vec<PhaseRecord>,
}

impl fmt::Debug for TrainedDetector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainedDetector").field("capabilities", &self.capabilities()).field("log", &self.log).finish()
    }
}

impl TrainedDetector {
    /// Wraps a backend that is already trained (or needs no training).
    pub fn pretrained(backend: Box<dyn DetectorBackend>) -> Self {
        Self { backend, log: Vec::new() }
    }

    pub fn capabilities(&self) -> BackendCapabilities {
        self.backend.capabilities()
    }

    pub fn backend(&self) -> &dyn DetectorBackend {
        self.backend.as_ref()
    }

    pub fn into_backend(self) -> Box<dyn DetectorBackend> {
        self.backend
    }

    /// Training log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("phase record serializes") + "\n").collect()
    }
}

/// Runs the phases of `strategy`: pretrain on `external` then fine-tune on
/// `custom`, or train on `custom` alone.
pub fn train_detector(
    mut backend: Box<dyn DetectorBackend>,
    strategy: TrainingStrategy,
    external: Option<&DetectionDataset>,
    custom: &DetectionDataset,
    hyperparams: &Hyperparams,
) -> Result<TrainedDetector, DetectionError> {
    let phases: Vec<(PhaseKind, &DetectionDataset)> = match (strategy, external) {
        (TrainingStrategy::PretrainThenFinetune, Some(ext)) => vec![(PhaseKind::Pretrain, ext), (PhaseKind::Finetune, custom)],
        (TrainingStrategy::PretrainThenFinetune, None) => {
            return Err(DetectionError::Config("pretrain-then-finetune requires an external dataset".into()))
        }
        (TrainingStrategy::CustomOnly, None) => vec![(PhaseKind::Train, custom)],
        (TrainingStrategy::CustomOnly, Some(_)) => {
            return Err(DetectionError::Config("custom-only training does not take an external dataset".into()))
        }
    };
    let caps = backend.capabilities();
    if !caps.trainable {
        return Err(DetectionError::NotTrainable(caps.model_name));
    }
    let mut log = Vec::with_capacity(phases.len());
    for (index, (kind, data)) in phases.into_iter().enumerate() {
        let phase = TrainingPhase {
            index,
            kind,
            dataset_id: data.id.clone(),
            samples: data.samples.len(),
            hyperparams: hyperparams.clone(),
        };
        backend
            .train(&phase, data, hyperparams)
            .map_err(|source| DetectionError::Training { phase: index, source })?;
        log.push(PhaseRecord { model_name: caps.model_name.clone(), strategy, phase });
    }
    Ok(TrainedDetector { backend, log })
}

/// Loads the page raster and runs the detector on it.
pub fn detect_page(state: &TrainedDetector, page: &PageImage) -> Result<Vec<Detection<f64>>, DetectionError> {
    let image = page
        .load()
        .map_err(|e| DetectionError::Raster { path: page.path.clone(), message: e.to_string() })?;
    detect_image(state, page, &image)
}

/// Runs the detector on an already loaded raster. Results are validated and
/// sorted by descending confidence (stable).
pub fn detect_image(state: &TrainedDetector, page: &PageImage, image: &RgbImage) -> Result<Vec<Detection<f64>>, DetectionError> {
    let mut dets = state
        .backend
        .predict(page, image)
        .map_err(|source| DetectionError::Backend { page: page.page_ref(), source })?;
    for d in &dets {
        d.validate().map_err(|source| DetectionError::InvalidDetection { page: page.page_ref(), source })?;
    }
    dets.sort_by(|a, b| cmp_scalar(b.confidence, a.confidence));
    Ok(dets)
}

/// A saved region cut from a page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub source: PageRef,
    pub class: LayoutClass,
    pub pixel_rect: PixelRect,
    pub confidence: f64,
    /// Index of the originating detection in the list given to the extractor.
    pub detection_index: usize,
    pub path: PathBuf,
}

impl Crop {
    /// `<doc>_<page>_<idx>`, also the file stem.
    pub fn id(&self) -> String {
        crop_id(&self.source, self.detection_index)
    }
}

fn crop_id(page: &PageRef, idx: usize) -> String {
    format!("{}_{:04}_{:03}", page.doc_id, page.page_number, idx)
}

/// Loads the page raster and saves crops for detections of `classes`.
pub fn extract_crops(
    page: &PageImage,
    dets: &[Detection<f64>],
    classes: &[LayoutClass],
    pad_px: u32,
    crops_root: &Path,
) -> Result<Vec<Crop>, DetectionError> {
    let image = page
        .load()
        .map_err(|e| DetectionError::Raster { path: page.path.clone(), message: e.to_string() })?;
    extract_crops_from_image(page, &image, dets, classes, pad_px, crops_root)
}

/// Saves `crops_root/<Class>/<doc>_<page>_<idx>.png` for each detection of
/// `classes`. Zero-area rectangles after clamping are skipped.
pub fn extract_crops_from_image(
    page: &PageImage,
    image: &RgbImage,
    dets: &[Detection<f64>],
    classes: &[LayoutClass],
    pad_px: u32,
    crops_root: &Path,
) -> Result<Vec<Crop>, DetectionError> {
    let (w, h) = image.dimensions();
    let source = page.page_ref();
    let mut crops = Vec::new();
    for (idx, d) in dets.iter().enumerate() {
        if !classes.contains(&d.class) {
            continue;
        }
        let Some(rect) = d.bbox.to_pixel_rect(w, h, pad_px) else {
            log::warn!("skipping zero-area {} crop {idx} on {source}", d.class);
            continue;
        };
        let dir = crops_root.join(d.class.name());
        fs::create_dir_all(&dir).map_err(|source| DetectionError::Io { path: dir.clone(), source })?;
        let path = dir.join(format!("{}.png", crop_id(&source, idx)));
        image::imageops::crop_imm(image, rect.x0, rect.y0, rect.width(), rect.height())
            .to_image()
            .save(&path)
            .map_err(|e| DetectionError::Raster { path: path.clone(), message: e.to_string() })?;
        crops.push(Crop { source: source.clone(), class: d.class, pixel_rect: rect, confidence: d.confidence, detection_index: idx, path });
    }
    Ok(crops)
}
