use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Deserialize;

use super::{BackendCapabilities, BackendError, DetectionDataset, Detection, DetectorBackend, Hyperparams, TrainingPhase};
use crate::annotation::LayoutClass;
use crate::command::CommandTemplate;
use crate::corpus::PageImage;
use crate::geometry::BBox;

/// Detector run as an external program.
///
/// The predict template gets `{image}`, `{weights}` and `{model}` and must
/// print a JSON array of `{class_id, cx, cy, w, h, confidence}` objects.
/// The optional train template gets `{data}`, `{weights}`, `{model}`,
/// `{phase}` and every hyperparameter by name.
#[derive(Debug, Clone)]
pub struct CommandDetector {
    model_name: String,
    predict: CommandTemplate,
    train: Option<CommandTemplate>,
    weights: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct RawDetection {
    class_id: u8,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    confidence: f64,
}

impl CommandDetector {
    pub fn new(model_name: impl Into<String>, predict: CommandTemplate, train: Option<CommandTemplate>, weights: Option<PathBuf>) -> Self {
        Self { model_name: model_name.into(), predict, train, weights }
    }

    fn base_vars(&self) -> BTreeMap<&'static str, String> {
        let mut vars = BTreeMap::new();
        vars.insert("model", self.model_name.clone());
        vars.insert("weights", self.weights.as_deref().map(|p| p.display().to_string()).unwrap_or_default());
        vars
    }
}

/// Parses the predict command's stdout.
pub(crate) fn parse_detections(stdout: &str) -> Result<Vec<Detection<f64>>, BackendError> {
    let raw: Vec<RawDetection> = serde_json::from_str(stdout.trim()).map_err(|e| BackendError::Output(e.to_string()))?;
    raw.into_iter()
        .map(|r| {
            let class = LayoutClass::from_id(r.class_id).ok_or_else(|| BackendError::Output(format!("unknown class id {}", r.class_id)))?;
            let bbox = BBox::new(r.cx, r.cy, r.w, r.h).map_err(|e| BackendError::Output(e.to_string()))?;
            Ok(Detection { class, bbox, confidence: r.confidence })
        })
        .collect()
}

impl DetectorBackend for CommandDetector {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { trainable: self.train.is_some(), model_name: self.model_name.clone() }
    }

    fn train(&mut self, phase: &TrainingPhase, data: &DetectionDataset, hyperparams: &Hyperparams) -> Result<(), BackendError> {
        let template = self.train.as_ref().ok_or_else(|| BackendError::Unsupported("no train command configured".into()))?;
        let root = data
            .root
            .as_deref()
            .ok_or_else(|| BackendError::Unsupported(format!("dataset '{}' has no directory", data.id)))?;
        let mut vars = self.base_vars();
        vars.insert("data", root.display().to_string());
        vars.insert("phase", format!("{:?}", phase.kind).to_lowercase());
        let mut owned: BTreeMap<&str, String> = vars.into_iter().collect();
        for (k, v) in hyperparams {
            owned.insert(k.as_str(), v.clone());
        }
        template.run(&owned)?;
        Ok(())
    }

    fn predict(&self, page: &PageImage, _image: &RgbImage) -> Result<Vec<Detection<f64>>, BackendError> {
        let mut vars = self.base_vars();
        vars.insert("image", page.path.display().to_string());
        let stdout = self.predict.run(&vars)?;
        parse_detections(&stdout)
    }

    fn save(&self, path: &Path) -> Result<(), BackendError> {
        match &self.weights {
            Some(w) if w != path => std::fs::copy(w, path)
                .map(|_| ())
                .map_err(|source| BackendError::Io { path: path.to_path_buf(), source }),
            Some(_) => Ok(()),
            None => Err(BackendError::Unsupported("command backend has no weights path".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_backend_output() {
        let out = r#"[{"class_id": 1, "cx": 0.5, "cy": 0.2, "w": 0.4, "h": 0.1, "confidence": 0.87}]"#;
        let dets = parse_detections(out).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class, LayoutClass::Title);
        assert!(parse_detections(r#"[{"class_id": 9, "cx": 0.5, "cy": 0.2, "w": 0.4, "h": 0.1, "confidence": 0.8}]"#).is_err());
        assert!(parse_detections("garbage").is_err());
    }

    #[cfg(unix)]
    #[test]
    fn runs_predict_template() {
        let json = r#"[{"class_id":0,"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,"confidence":0.9}]"#;
        let t = CommandTemplate::parse(&format!("echo {json}")).unwrap();
        let backend = CommandDetector::new("echo", t, None, None);
        assert!(!backend.capabilities().trainable);
        let page = PageImage { doc_id: "a".into(), page_number: 1, width_px: 1, height_px: 1, path: "x.png".into() };
        let dets = backend.predict(&page, &RgbImage::new(1, 1)).unwrap();
        assert_eq!(dets[0].class, LayoutClass::Text);
    }
}
