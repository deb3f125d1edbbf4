//! End-to-end run: detect, filter, crop, then OCR for textual regions and
//! subclassification plus description for pictures, one record per page.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{LayoutClass, PageRef};
use crate::command::CommandTemplate;
use crate::config::{ClassifierKind, ConfigError, DetectorKind, OcrKind, PipelineConfig, ScorerKind, ValidatedConfig};
use crate::corpus::{DatasetManifest, PageImage, MANIFEST_FILE};
use crate::detection::{
    detect_image, extract_crops_from_image, filter_detections, BlobDetector, CommandDetector, Crop, DetectorBackend, StubDetector,
    TrainedDetector,
};
use crate::geometry::BBox;
use crate::ocr::{run_ocr, CommandOcrEngine, OcrEngine, StubOcrEngine};
use crate::picture::{
    classify_crop, default_prompts, describe_illustration, load_prompts, CentroidClassifier, CommandClassifier, CommandScorer,
    DescriptionPrompt, ImageTextScorer, PictureClassifier, PictureSubclass, StubClassifier, StubScorer, StubScores,
    TrainedSubclassifier,
};

/// Instantiated backends for a run.
pub struct Backends {
    pub detector: TrainedDetector,
    pub classifier: TrainedSubclassifier,
    pub scorer: Box<dyn ImageTextScorer>,
    pub ocr: Vec<Box<dyn OcrEngine>>,
    pub prompts: Vec<DescriptionPrompt>,
}

fn backend_error(field: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid(vec![crate::config::ValidationError::Invalid { field: field.into(), message: message.to_string() }])
}

fn parse_template(field: &str, t: Option<&String>) -> Result<CommandTemplate, ConfigError> {
    let t = t.ok_or_else(|| backend_error(field, "missing command"))?;
    CommandTemplate::parse(t).map_err(|e| backend_error(field, e))
}

fn optional_template(field: &str, t: Option<&String>) -> Result<Option<CommandTemplate>, ConfigError> {
    t.map(|_| parse_template(field, t)).transpose()
}

impl Backends {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, ConfigError> {
        let d = &cfg.detector;
        let detector: Box<dyn DetectorBackend> = match d.kind {
            DetectorKind::Stub => match &d.weights {
                Some(p) => Box::new(StubDetector::from_file(p).map_err(|e| backend_error("detector.weights", e))?),
                None => Box::new(StubDetector::default()),
            },
            DetectorKind::Blob => {
                let p = d.weights.as_ref().ok_or_else(|| backend_error("detector.weights", "blob detector needs trained state"))?;
                Box::new(BlobDetector::load(p).map_err(|e| backend_error("detector.weights", e))?)
            }
            DetectorKind::Command => Box::new(CommandDetector::new(
                d.model.clone().unwrap_or_else(|| "command-detector".into()),
                parse_template("detector.predict", d.predict.as_ref())?,
                optional_template("detector.train", d.train.as_ref())?,
                d.weights.clone(),
            )),
        };
        let c = &cfg.classifier;
        let classifier: Box<dyn PictureClassifier> = match c.kind {
            ClassifierKind::Stub => Box::new(StubClassifier::favoring(c.stub_subclass)),
            ClassifierKind::Centroid => {
                let p = c.weights.as_ref().ok_or_else(|| backend_error("classifier.weights", "centroid classifier needs trained state"))?;
                Box::new(CentroidClassifier::load(p).map_err(|e| backend_error("classifier.weights", e))?)
            }
            ClassifierKind::Command => Box::new(CommandClassifier::new(
                c.model.clone().unwrap_or_else(|| "command-classifier".into()),
                parse_template("classifier.predict", c.predict.as_ref())?,
                optional_template("classifier.train", c.train.as_ref())?,
                c.weights.clone(),
            )),
        };
        let scorer: Box<dyn ImageTextScorer> = match cfg.scorer.kind {
            ScorerKind::Stub => Box::new(StubScorer { mode: StubScores::Index }),
            ScorerKind::Command => Box::new(CommandScorer::new(
                cfg.scorer.name.clone().unwrap_or_else(|| "command-scorer".into()),
                parse_template("scorer.command", cfg.scorer.command.as_ref())?,
            )),
        };
        let mut ocr: Vec<Box<dyn OcrEngine>> = Vec::new();
        for (name, e) in &cfg.ocr {
            ocr.push(match e.kind {
                OcrKind::Stub => Box::new(StubOcrEngine::new(name.clone(), e.stub_text.clone())),
                OcrKind::Command => Box::new(CommandOcrEngine::new(
                    name.clone(),
                    parse_template(&format!("ocr.{name}.command"), e.command.as_ref())?,
                    e.language.clone(),
                )),
            });
        }
        let prompts = match &cfg.prompts {
            Some(p) => load_prompts(p).map_err(|e| backend_error("prompts", e))?,
            None => default_prompts(),
        };
        Ok(Self {
            detector: TrainedDetector::pretrained(detector),
            classifier: TrainedSubclassifier::pretrained(classifier),
            scorer,
            ocr,
            prompts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDetection {
    pub index: usize,
    pub class: LayoutClass,
    pub bbox: BBox<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEntry {
    /// Index into the record's detections.
    pub detection: usize,
    pub crop: String,
    pub engine: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PictureEntry {
    pub detection: usize,
    pub crop: String,
    pub subclass: PictureSubclass,
    pub probability: f64,
    pub description: Option<String>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub detection: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub detector: String,
    pub classifier: String,
    pub scorer: String,
    pub ocr_engines: Vec<String>,
    pub config_hash: String,
    pub confidence_threshold: f64,
    /// Unix milliseconds.
    pub started_ms: u64,
    pub finished_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub doc_id: String,
    pub page_number: u32,
    pub status: PageStatus,
    pub detections: Vec<RecordDetection>,
    pub texts: Vec<TextEntry>,
    pub pictures: Vec<PictureEntry>,
    pub failures: Vec<StageFailure>,
    pub provenance: Provenance,
}

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("{page}: {what} references missing detection {index}")]
    Dangling { page: PageRef, what: &'static str, index: usize },
    #[error("{page}: {what} references a {class} detection")]
    WrongClass { page: PageRef, what: &'static str, class: LayoutClass },
    #[error("{page}: description on a {subclass} picture")]
    Description { page: PageRef, subclass: PictureSubclass },
    #[error("{page}: detection {index} is invalid: {message}")]
    Detection { page: PageRef, index: usize, message: String },
    #[error("{page}: status does not match recorded failures")]
    Status { page: PageRef },
}

impl PageRecord {
    pub fn page_ref(&self) -> PageRef {
        PageRef::new(self.doc_id.clone(), self.page_number)
    }

    /// Checks referential integrity and the subclass rules.
    pub fn validate(&self) -> Result<(), RecordError> {
        let page = self.page_ref();
        for (i, d) in self.detections.iter().enumerate() {
            let bad = |message: String| RecordError::Detection { page: page.clone(), index: i, message };
            if d.index != i {
                return Err(bad(format!("index field is {}", d.index)));
            }
            d.bbox.validate().map_err(|e| bad(e.to_string()))?;
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(bad(format!("confidence {}", d.confidence)));
            }
        }
        let lookup = |what: &'static str, index: usize| {
            self.detections.get(index).ok_or_else(|| RecordError::Dangling { page: page.clone(), what, index })
        };
        for t in &self.texts {
            let d = lookup("text", t.detection)?;
            if !d.class.is_textual() {
                return Err(RecordError::WrongClass { page: page.clone(), what: "text", class: d.class });
            }
        }
        for p in &self.pictures {
            let d = lookup("picture", p.detection)?;
            if d.class != LayoutClass::Picture {
                return Err(RecordError::WrongClass { page: page.clone(), what: "picture", class: d.class });
            }
            if (p.description.is_some() || p.score.is_some()) && p.subclass != PictureSubclass::Illustration {
                return Err(RecordError::Description { page: page.clone(), subclass: p.subclass });
            }
        }
        if (self.status == PageStatus::Partial) != !self.failures.is_empty() {
            return Err(RecordError::Status { page });
        }
        Ok(())
    }

    /// Copy with provenance timestamps zeroed, for content comparisons.
    pub fn without_timestamps(&self) -> Self {
        let mut r = self.clone();
        r.provenance.started_ms = 0;
        r.provenance.finished_ms = 0;
        r
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub pages: usize,
    pub partial_pages: usize,
    pub detections_kept: usize,
    pub text_crops: usize,
    pub texts: usize,
    pub picture_crops: usize,
    pub pictures: usize,
    pub wrong_detections: usize,
    pub described: usize,
    pub failures: Vec<(PageRef, StageFailure)>,
}

impl RunSummary {
    fn from_records(config_hash: &str, records: &[PageRecord], crops: &[(usize, usize)]) -> Self {
        let mut s = RunSummary { config_hash: config_hash.to_string(), pages: records.len(), ..Self::default() };
        for (r, (text_crops, picture_crops)) in records.iter().zip(crops) {
            s.partial_pages += usize::from(r.status == PageStatus::Partial);
            s.detections_kept += r.detections.len();
            s.text_crops += text_crops;
            s.picture_crops += picture_crops;
            s.texts += r.texts.len();
            s.pictures += r.pictures.len();
            s.wrong_detections += r.pictures.iter().filter(|p| p.subclass == PictureSubclass::WrongDetection).count();
            s.described += r.pictures.iter().filter(|p| p.description.is_some()).count();
            s.failures.extend(r.failures.iter().map(|f| (r.page_ref(), f.clone())));
        }
        s
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct PageContext<'a> {
    cfg: &'a ValidatedConfig,
    backends: &'a Backends,
    crops_root: PathBuf,
}

impl PageContext<'_> {
    fn provenance(&self) -> Provenance {
        let b = self.backends;
        Provenance {
            detector: b.detector.capabilities().model_name,
            classifier: b.classifier.backend().capabilities().model_name,
            scorer: b.scorer.name().to_string(),
            ocr_engines: b.ocr.iter().map(|e| e.name().to_string()).collect(),
            config_hash: self.cfg.hash.clone(),
            confidence_threshold: self.cfg.confidence_threshold,
            started_ms: now_ms(),
            finished_ms: 0,
        }
    }

    /// Returns the record and the number of text and picture crops made.
    fn process(&self, page: &PageImage) -> (PageRecord, (usize, usize)) {
        let stages = &self.cfg.config.stages;
        let mut record = PageRecord {
            doc_id: page.doc_id.clone(),
            page_number: page.page_number,
            status: PageStatus::Complete,
            detections: Vec::new(),
            texts: Vec::new(),
            pictures: Vec::new(),
            failures: Vec::new(),
            provenance: self.provenance(),
        };
        let mut fail = |record: &mut PageRecord, stage: &str, detection: Option<usize>, message: String| {
            log::warn!("{}: {stage} failed: {message}", page.page_ref());
            record.failures.push(StageFailure { stage: stage.into(), detection, message });
        };
        let mut crop_counts = (0, 0);
        'page: {
            let image = match page.load() {
                Ok(i) => i,
                Err(e) => {
                    fail(&mut record, "load", None, e.to_string());
                    break 'page;
                }
            };
            let all = match detect_image(&self.backends.detector, page, &image) {
                Ok(d) => d,
                Err(e) => {
                    fail(&mut record, "detect", None, e.to_string());
                    break 'page;
                }
            };
            let kept = filter_detections(&all, self.cfg.confidence_threshold);
            record.detections = kept
                .iter()
                .enumerate()
                .map(|(index, d)| RecordDetection { index, class: d.class, bbox: d.bbox, confidence: d.confidence })
                .collect();

            let mut classes = Vec::new();
            if stages.ocr {
                classes.extend([LayoutClass::Text, LayoutClass::Title]);
            }
            if stages.classify {
                classes.push(LayoutClass::Picture);
            }
            if classes.is_empty() {
                break 'page;
            }
            let crops = match extract_crops_from_image(page, &image, &kept, &classes, self.cfg.config.crop_pad, &self.crops_root) {
                Ok(c) => c,
                Err(e) => {
                    fail(&mut record, "crop", None, e.to_string());
                    break 'page;
                }
            };
            for crop in &crops {
                if crop.class.is_textual() {
                    crop_counts.0 += 1;
                    self.recognize(crop, &mut record, &mut fail);
                } else {
                    crop_counts.1 += 1;
                    self.analyse_picture(crop, &mut record, &mut fail);
                }
            }
        }
        if !record.failures.is_empty() {
            record.status = PageStatus::Partial;
        }
        record.provenance.finished_ms = now_ms();
        (record, crop_counts)
    }

    fn recognize(&self, crop: &Crop, record: &mut PageRecord, fail: &mut impl FnMut(&mut PageRecord, &str, Option<usize>, String)) {
        for engine in &self.backends.ocr {
            match run_ocr(crop, engine.as_ref()) {
                Ok(r) => {
                    let txt = crop.path.with_extension(format!("{}.txt", r.engine));
                    if let Err(e) = fs::write(&txt, &r.text) {
                        fail(record, "ocr", Some(crop.detection_index), format!("{}: {e}", txt.display()));
                    }
                    record.texts.push(TextEntry { detection: crop.detection_index, crop: r.crop, engine: r.engine, text: r.text });
                }
                Err(e) => fail(record, "ocr", Some(crop.detection_index), e.to_string()),
            }
        }
    }

    fn analyse_picture(&self, crop: &Crop, record: &mut PageRecord, fail: &mut impl FnMut(&mut PageRecord, &str, Option<usize>, String)) {
        let prediction = match classify_crop(&self.backends.classifier, crop) {
            Ok(p) => p,
            Err(e) => return fail(record, "classify", Some(crop.detection_index), e.to_string()),
        };
        let mut entry = PictureEntry {
            detection: crop.detection_index,
            crop: crop.id(),
            subclass: prediction.subclass,
            probability: prediction.probability(prediction.subclass),
            description: None,
            score: None,
        };
        if self.cfg.config.stages.describe && prediction.subclass == PictureSubclass::Illustration {
            match describe_illustration(self.backends.scorer.as_ref(), crop, prediction.subclass, &self.backends.prompts) {
                Ok(m) => {
                    entry.description = Some(m.top.text.clone());
                    entry.score = Some(m.ranked[0].score);
                }
                Err(e) => fail(record, "describe", Some(crop.detection_index), e.to_string()),
            }
        }
        record.pictures.push(entry);
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no corpus: set corpus.root to a directory containing {MANIFEST_FILE}")]
    NoCorpus,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus: {0}")]
    Corpus(#[from] crate::corpus::IngestError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Processes every manifest page on a pool of `workers` threads. Records
/// come back in manifest order; page failures are recorded, not raised.
pub fn run_pipeline(
    cfg: &ValidatedConfig,
    backends: &Backends,
    manifest: &DatasetManifest,
) -> Result<(Vec<PageRecord>, RunSummary), PipelineError> {
    let crops_root = cfg.config.output.join("crops");
    fs::create_dir_all(&crops_root).map_err(|source| PipelineError::Io { path: crops_root.clone(), source })?;
    let ctx = PageContext { cfg, backends, crops_root };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.config.workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let results: Vec<(PageRecord, (usize, usize))> = pool.install(|| manifest.pages.par_iter().map(|p| ctx.process(p)).collect());
    let (records, crops): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let summary = RunSummary::from_records(&cfg.hash, &records, &crops);
    Ok((records, summary))
}

/// Loads the manifest and backends named by the config, then runs.
pub fn run_from_config(cfg: &ValidatedConfig) -> Result<(Vec<PageRecord>, RunSummary), PipelineError> {
    let root = cfg.config.corpus.root.as_ref().ok_or(PipelineError::NoCorpus)?;
    let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
    let backends = Backends::from_config(&cfg.config)?;
    run_pipeline(cfg, &backends, &manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Json,
    Csv,
}

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub doc_id: String,
    pub page_number: u32,
    pub status: PageStatus,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecordIndex {
    pub pages: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";
pub const RECORDS_CSV: &str = "records.csv";

/// One CSV row per detection; OCR output and picture analysis flattened in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub doc_id: String,
    pub page_number: u32,
    pub status: PageStatus,
    pub detection: usize,
    pub class: LayoutClass,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    /// JSON object of engine name to text; empty when not recognized.
    pub texts: String,
    pub subclass: Option<PictureSubclass>,
    /// Empty when the picture was not described.
    pub description: String,
    pub score: Option<f64>,
}

pub fn csv_rows(records: &[PageRecord]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for r in records {
        for d in &r.detections {
            let texts: BTreeMap<&str, &str> =
                r.texts.iter().filter(|t| t.detection == d.index).map(|t| (t.engine.as_str(), t.text.as_str())).collect();
            let picture = r.pictures.iter().find(|p| p.detection == d.index);
            rows.push(CsvRow {
                doc_id: r.doc_id.clone(),
                page_number: r.page_number,
                status: r.status,
                detection: d.index,
                class: d.class,
                cx: d.bbox.cx,
                cy: d.bbox.cy,
                w: d.bbox.w,
                h: d.bbox.h,
                confidence: d.confidence,
                texts: if texts.is_empty() { String::new() } else { serde_json::to_string(&texts).expect("map serializes") },
                subclass: picture.map(|p| p.subclass),
                description: picture.and_then(|p| p.description.clone()).unwrap_or_default(),
                score: picture.and_then(|p| p.score),
            });
        }
    }
    rows
}

/// JSON: `records/<doc>_pNNNN.json` per page plus `records/index.json`.
/// CSV: a single `records.csv`. Returns the files written.
pub fn emit_records(records: &[PageRecord], out: &Path, format: RecordFormat) -> Result<Vec<PathBuf>, EmitError> {
    match format {
        RecordFormat::Json => {
            let dir = out.join("records");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut written = Vec::new();
            let mut index = RecordIndex::default();
            for r in records {
                let file = format!("{}.json", PageImage::file_name(&r.doc_id, r.page_number).trim_end_matches(".png"));
                let path = dir.join(&file);
                fs::write(&path, serde_json::to_string_pretty(r).expect("record serializes")).map_err(io_err(&path))?;
                index.pages.push(IndexEntry { doc_id: r.doc_id.clone(), page_number: r.page_number, status: r.status, file });
                written.push(path);
            }
            let path = dir.join(INDEX_FILE);
            fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes")).map_err(io_err(&path))?;
            written.push(path);
            Ok(written)
        }
        RecordFormat::Csv => {
            fs::create_dir_all(out).map_err(io_err(out))?;
            let path = out.join(RECORDS_CSV);
            let fmt_err = |e: csv::Error| EmitError::Format { path: path.clone(), message: e.to_string() };
            let mut w = csv::Writer::from_path(&path).map_err(fmt_err)?;
            for row in csv_rows(records) {
                w.serialize(row).map_err(fmt_err)?;
            }
            w.flush().map_err(io_err(&path))?;
            Ok(vec![path])
        }
    }
}

/// Reads back the JSON records listed in `records/index.json`.
pub fn read_records_json(out: &Path) -> Result<Vec<PageRecord>, EmitError> {
    let dir = out.join("records");
    let index_path = dir.join(INDEX_FILE);
    let parse = |path: &Path| -> Result<String, EmitError> { fs::read_to_string(path).map_err(io_err(path)) };
    let index: RecordIndex = serde_json::from_str(&parse(&index_path)?)
        .map_err(|e| EmitError::Format { path: index_path.clone(), message: e.to_string() })?;
    index
        .pages
        .iter()
        .map(|e| {
            let path = dir.join(&e.file);
            serde_json::from_str(&parse(&path)?).map_err(|err| EmitError::Format { path: path.clone(), message: err.to_string() })
        })
        .collect()
}

pub fn read_records_csv(path: &Path) -> Result<Vec<CsvRow>, EmitError> {
    let fmt_err = |e: csv::Error| EmitError::Format { path: path.to_path_buf(), message: e.to_string() };
    csv::Reader::from_path(path).map_err(fmt_err)?.deserialize().map(|r| r.map_err(fmt_err)).collect()
}

/// Pages whose text and picture stages touched disjoint detections.
pub fn stages_are_disjoint(record: &PageRecord) -> bool {
    let texts: BTreeSet<usize> = record.texts.iter().map(|t| t.detection).collect();
    record.pictures.iter().all(|p| !texts.contains(&p.detection))
}
