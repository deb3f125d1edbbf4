use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;

use super::{
    BackendCapabilities, BackendError, DetectionDataset, Detection, DetectorBackend, Hyperparams, PageDetections,
    TrainingPhase,
};
use crate::annotation::PageRef;
use crate::corpus::PageImage;

/// Returns pre-seeded detections per page.
///
/// Training memorizes the ground truth of every training page (confidence
/// 1.0), replacing earlier seeds for those pages. A frozen stub refuses to
/// train.
#[derive(Debug, Clone)]
pub struct StubDetector {
    seeds: BTreeMap<PageRef, Vec<Detection<f64>>>,
    trainable: bool,
}

impl Default for StubDetector {
    fn default() -> Self {
        Self::new(BTreeMap::new())
    }
}

impl StubDetector {
    pub fn new(seeds: BTreeMap<PageRef, Vec<Detection<f64>>>) -> Self {
        Self { seeds, trainable: true }
    }

    pub fn frozen(seeds: BTreeMap<PageRef, Vec<Detection<f64>>>) -> Self {
        Self { seeds, trainable: false }
    }

    /// Reads a detections file (a JSON list of [`PageDetections`]).
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let body = fs::read_to_string(path).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
        let pages: Vec<PageDetections> = serde_json::from_str(&body).map_err(|e| BackendError::Output(e.to_string()))?;
        Ok(Self::new(pages.into_iter().map(|p| (p.page_ref(), p.detections)).collect()))
    }
}

impl DetectorBackend for StubDetector {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { trainable: self.trainable, model_name: "stub".into() }
    }

    fn train(&mut self, _phase: &TrainingPhase, data: &DetectionDataset, _hp: &Hyperparams) -> Result<(), BackendError> {
        if !self.trainable {
            return Err(BackendError::Unsupported("frozen stub".into()));
        }
        for s in &data.samples {
            let dets = s
                .annotation
                .regions
                .iter()
                .map(|r| Detection { class: r.class, bbox: r.bbox, confidence: 1.0 })
                .collect();
            self.seeds.insert(s.page.page_ref(), dets);
        }
        Ok(())
    }

    fn predict(&self, page: &PageImage, _image: &RgbImage) -> Result<Vec<Detection<f64>>, BackendError> {
        Ok(self.seeds.get(&page.page_ref()).cloned().unwrap_or_default())
    }

    fn save(&self, path: &Path) -> Result<(), BackendError> {
        let pages: Vec<PageDetections> = self
            .seeds
            .iter()
            .map(|(k, v)| PageDetections { doc_id: k.doc_id.clone(), page_number: k.page_number, detections: v.clone() })
            .collect();
        let body = serde_json::to_string_pretty(&pages).map_err(|e| BackendError::Output(e.to_string()))?;
        fs::write(path, body).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })
    }
}
