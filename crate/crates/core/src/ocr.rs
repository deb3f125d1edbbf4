//! Text recognition over Text/Title crops and engine comparison by
//! character and word error rate.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::command::{CommandError, CommandTemplate};
use crate::detection::Crop;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error("{0}")]
    Other(String),
}

/// An OCR engine. Output must be deterministic for the same crop and settings.
pub trait OcrEngine: Send + Sync {
    fn name(&self) -> &str;
    fn recognize(&self, image: &Path) -> Result<String, EngineError>;
}

/// Returns configured text: per crop file name if present, else a default.
#[derive(Debug, Clone, Default)]
pub struct StubOcrEngine {
    name: String,
    default_text: String,
    by_file: BTreeMap<String, String>,
}

impl StubOcrEngine {
    pub fn new(name: impl Into<String>, default_text: impl Into<String>) -> Self {
        Self { name: name.into(), default_text: default_text.into(), by_file: BTreeMap::new() }
    }

    pub fn with_file(mut self, file_name: impl Into<String>, text: impl Into<String>) -> Self {
        self.by_file.insert(file_name.into(), text.into());
        self
    }
}

impl OcrEngine for StubOcrEngine {
    fn name(&self) -> &str {
        &self.name
    }

    fn recognize(&self, image: &Path) -> Result<String, EngineError> {
        let key = image.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(self.by_file.get(&key).unwrap_or(&self.default_text).clone())
    }
}

/// Engine run as a subprocess, e.g. `tesseract {image} stdout -l {lang}`.
/// `{lang}` expands to the configured language or model id.
#[derive(Debug, Clone)]
pub struct CommandOcrEngine {
    name: String,
    template: CommandTemplate,
    language: String,
}

impl CommandOcrEngine {
    pub fn new(name: impl Into<String>, template: CommandTemplate, language: impl Into<String>) -> Self {
        Self { name: name.into(), template, language: language.into() }
    }
}

impl OcrEngine for CommandOcrEngine {
    fn name(&self) -> &str {
        &self.name
    }

    fn recognize(&self, image: &Path) -> Result<String, EngineError> {
        let vars = BTreeMap::from([("image", image.display().to_string()), ("lang", self.language.clone())]);
        Ok(self.template.run(&vars)?.trim_end().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    /// Crop id (`<doc>_<page>_<idx>`).
    pub crop: String,
    pub engine: String,
    pub text: String,
    pub duration_ms: u64,
}

#[derive(Debug, Error)]
pub enum OcrError {
    #[error("crop {crop} has class {class}; only Text and Title crops are recognized")]
    WrongClass { crop: String, class: String },
    #[error("engine '{engine}' failed on crop {crop}: {source}")]
    Engine { engine: String, crop: String, source: EngineError },
}

pub fn run_ocr(crop: &Crop, engine: &dyn OcrEngine) -> Result<OcrResult, OcrError> {
    if !crop.class.is_textual() {
        return Err(OcrError::WrongClass { crop: crop.id(), class: crop.class.to_string() });
    }
    let start = Instant::now();
    let text = engine.recognize(&crop.path).map_err(|source| OcrError::Engine {
        engine: engine.name().to_string(),
        crop: crop.id(),
        source,
    })?;
    Ok(OcrResult { crop: crop.id(), engine: engine.name().to_string(), text, duration_ms: start.elapsed().as_millis() as u64 })
}

/// Unit-cost edit distance, two-row dynamic programming.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nfc_chars(s: &str) -> Vec<char> {
    s.nfc().collect()
}

fn rate(distance: usize, reference_len: usize) -> f64 {
    // Empty reference: the distance itself (hypothesis length), flagged by callers.
    distance as f64 / reference_len.max(1) as f64
}

/// Character error rate after NFC normalization.
///
/// With an empty reference this is the hypothesis length (0 when both are
/// empty); see [`is_degenerate_reference`].
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let (r, h) = (nfc_chars(reference), nfc_chars(hypothesis));
    rate(levenshtein(&r, &h), r.len())
}

/// Word error rate; tokens split on Unicode whitespace, punctuation kept.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    let (r, h): (String, String) = (reference.nfc().collect(), hypothesis.nfc().collect());
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    rate(levenshtein(&rw, &hw), rw.len())
}

pub fn is_degenerate_reference(reference: &str) -> bool {
    reference.nfc().next().is_none()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineScore {
    pub engine: String,
    pub text: String,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionComparison {
    pub crop: String,
    /// Reference was empty, so rates are hypothesis lengths.
    pub degenerate: bool,
    pub scores: Vec<EngineScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub engine: String,
    pub crops: usize,
    pub mean_cer: f64,
    pub mean_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineComparison {
    pub per_crop: Vec<TranscriptionComparison>,
    /// Ascending mean CER; ties by engine name.
    pub ranking: Vec<EngineSummary>,
    /// Crops skipped because no reference was given.
    pub missing_references: usize,
}

impl EngineComparison {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("rank,engine,crops,mean_cer,mean_wer\n");
        for (i, s) in self.ranking.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", i + 1, s.engine, s.crops, s.mean_cer, s.mean_wer));
        }
        out
    }
}

/// A crop with its (optional) ground-truth transcription.
#[derive(Debug, Clone)]
pub struct ReferenceSample {
    pub crop: Crop,
    pub reference: Option<String>,
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs every engine on every referenced crop and ranks engines by mean CER.
pub fn compare_engines(samples: &[ReferenceSample], engines: &[&dyn OcrEngine]) -> Result<EngineComparison, OcrError> {
    let mut per_crop = Vec::new();
    let mut missing_references = 0;
    for sample in samples {
        let Some(reference) = &sample.reference else {
            log::warn!("no reference transcription for crop {}", sample.crop.id());
            missing_references += 1;
            continue;
        };
        let mut scores = Vec::with_capacity(engines.len());
        for engine in engines {
            let result = run_ocr(&sample.crop, *engine)?;
            scores.push(EngineScore {
                engine: result.engine,
                cer: cer(reference, &result.text),
                wer: wer(reference, &result.text),
                text: result.text,
            });
        }
        per_crop.push(TranscriptionComparison { crop: sample.crop.id(), degenerate: is_degenerate_reference(reference), scores });
    }
    Ok(summarize(per_crop, engines.iter().map(|e| e.name().to_string()).collect(), missing_references))
}

/// Ranks engines from already scored crops.
pub fn summarize(per_crop: Vec<TranscriptionComparison>, engines: Vec<String>, missing_references: usize) -> EngineComparison {
    let mut ranking: Vec<EngineSummary> = engines
        .into_iter()
        .map(|engine| {
            let mine: Vec<&EngineScore> = per_crop.iter().flat_map(|c| c.scores.iter()).filter(|s| s.engine == engine).collect();
            EngineSummary {
                crops: mine.len(),
                mean_cer: stable_mean(mine.iter().map(|s| s.cer).collect()),
                mean_wer: stable_mean(mine.iter().map(|s| s.wer).collect()),
                engine,
            }
        })
        .collect();
    ranking.sort_by(|a, b| a.mean_cer.total_cmp(&b.mean_cer).then_with(|| a.engine.cmp(&b.engine)));
    EngineComparison { per_crop, ranking, missing_references }
}
