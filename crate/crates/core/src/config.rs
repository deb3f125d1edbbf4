//! Declarative pipeline configuration: a TOML document, overridable from
//! the environment, validated with every problem reported at once.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::SplitRatios;
use crate::command::CommandTemplate;
use crate::corpus::{DEFAULT_DPI, DEFAULT_MAX_PAGES, MANIFEST_FILE};
use crate::evaluation::{EvalReport, DEFAULT_IOU_THRESHOLD};
use crate::picture::PictureSubclass;

/// Environment variables starting with this prefix override config keys;
/// `__` separates nesting levels, e.g. `INCUNABULA_THRESHOLDS__CONFIDENCE`.
pub const ENV_PREFIX: &str = "INCUNABULA_";

/// Used when no evaluation report supplies an operating point.
pub const DEFAULT_CONFIDENCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory holding the page manifest.
    pub root: Option<PathBuf>,
    pub dpi: u32,
    pub max_pages: u32,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { root: None, dpi: DEFAULT_DPI, max_pages: DEFAULT_MAX_PAGES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub confidence: f64,
    pub iou: f64,
    /// When set, the report's best operating point replaces `confidence`.
    pub eval_report: Option<PathBuf>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { confidence: DEFAULT_CONFIDENCE, iou: DEFAULT_IOU_THRESHOLD, eval_report: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub by_document: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { seed: 0, ratios: SplitRatios::default(), by_document: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub ocr: bool,
    pub classify: bool,
    pub describe: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { ocr: true, classify: true, describe: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    #[default]
    Stub,
    Blob,
    Command,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Stub: a detections file. Blob: saved state. Command: passed as `{weights}`.
    pub weights: Option<PathBuf>,
    pub model: Option<String>,
    pub predict: Option<String>,
    pub train: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Stub,
    Centroid,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub weights: Option<PathBuf>,
    pub model: Option<String>,
    pub predict: Option<String>,
    pub train: Option<String>,
    /// Subclass favored by the stub.
    pub stub_subclass: PictureSubclass,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Stub,
            weights: None,
            model: None,
            predict: None,
            train: None,
            stub_subclass: PictureSubclass::Illustration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Stub,
    Command,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub name: Option<String>,
    pub command: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcrKind {
    #[default]
    Stub,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcrEngineConfig {
    pub kind: OcrKind,
    pub command: Option<String>,
    /// Language or model id, `{lang}` in the command.
    pub language: String,
    /// Text returned by the stub.
    pub stub_text: String,
}

impl Default for OcrEngineConfig {
    fn default() -> Self {
        Self { kind: OcrKind::Stub, command: None, language: "lat".into(), stub_text: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub output: PathBuf,
    /// Page worker threads; 0 uses one per core.
    pub workers: usize,
    pub thresholds: Thresholds,
    pub split: SplitSection,
    pub stages: Stages,
    /// Margin in pixels added around crops.
    pub crop_pad: u32,
    pub detector: DetectorConfig,
    pub classifier: ClassifierConfig,
    pub scorer: ScorerConfig,
    /// Engines by name.
    pub ocr: BTreeMap<String, OcrEngineConfig>,
    /// JSON list of description prompts; the built-in list when unset.
    pub prompts: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSection::default(),
            output: PathBuf::from("output"),
            workers: 0,
            thresholds: Thresholds::default(),
            split: SplitSection::default(),
            stages: Stages::default(),
            crop_pad: 0,
            detector: DetectorConfig::default(),
            classifier: ClassifierConfig::default(),
            scorer: ScorerConfig::default(),
            ocr: BTreeMap::from([("stub".to_string(), OcrEngineConfig::default())]),
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationError {
    OutOfRange { field: String, value: String, range: &'static str },
    MissingPath { field: String, path: PathBuf },
    Missing { field: String, reason: String },
    Invalid { field: String, message: String },
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationError::OutOfRange { field, value, range } => write!(f, "{field} = {value} is outside {range}"),
            ValidationError::MissingPath { field, path } => write!(f, "{field}: {} does not exist", path.display()),
            ValidationError::Missing { field, reason } => write!(f, "{field} is required: {reason}"),
            ValidationError::Invalid { field, message } => write!(f, "{field}: {message}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ValidationError>),
}

/// Parses `text` (TOML) after applying `INCUNABULA_*` overrides from `env`.
pub fn parse_config(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    overrides.sort();
    for (var, value) in overrides {
        apply_override(&mut table, &var, &value)?;
    }
    table.try_into().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))
}

/// Reads the file if given (defaults otherwise) plus the process environment.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text, std::env::vars())?;
    // Relative paths in a config file are relative to that file.
    if let Some(base) = path.and_then(Path::parent).filter(|b| !b.as_os_str().is_empty()) {
        cfg.resolve_paths(base);
    }
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, var: &str, raw: &str) -> Result<(), ConfigError> {
    let keys: Vec<String> = var[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
    if keys.iter().any(String::is_empty) {
        return Err(ConfigError::Env { var: var.into(), message: "empty key segment".into() });
    }
    // Values are read as TOML scalars when they parse as such, else as strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Env { var: var.into(), message: format!("'{k}' is not a table") })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl PipelineConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.corpus.root.as_mut() {
            fix(p)
        }
        fix(&mut self.output);
        for p in [
            self.thresholds.eval_report.as_mut(),
            self.detector.weights.as_mut(),
            self.classifier.weights.as_mut(),
            self.prompts.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

/// A configuration that passed validation, with its derived values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    pub config: PipelineConfig,
    /// Hex SHA-256 of the canonical JSON form.
    pub hash: String,
    /// The operating threshold actually applied.
    pub confidence_threshold: f64,
}

/// SHA-256 of the config's JSON serialization (fields in declaration order,
/// maps sorted).
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn unit_interval(errors: &mut Vec<ValidationError>, field: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        errors.push(ValidationError::OutOfRange { field: field.into(), value: v.to_string(), range: "[0, 1]" });
    }
}

fn existing(errors: &mut Vec<ValidationError>, field: &str, path: Option<&PathBuf>) {
    if let Some(p) = path {
        if !p.exists() {
            errors.push(ValidationError::MissingPath { field: field.into(), path: p.clone() });
        }
    }
}

fn template(errors: &mut Vec<ValidationError>, field: &str, value: Option<&String>, required_for: Option<&str>) {
    match (value, required_for) {
        (Some(t), _) => {
            if let Err(e) = CommandTemplate::parse(t) {
                errors.push(ValidationError::Invalid { field: field.into(), message: e.to_string() });
            }
        }
        (None, Some(kind)) => errors.push(ValidationError::Missing { field: field.into(), reason: format!("{kind} backend runs it") }),
        (None, None) => {}
    }
}

/// Checks every constraint and reports all violations together.
pub fn validate_config(cfg: PipelineConfig) -> Result<ValidatedConfig, ConfigError> {
    let mut errors = Vec::new();
    unit_interval(&mut errors, "thresholds.confidence", cfg.thresholds.confidence);
    unit_interval(&mut errors, "thresholds.iou", cfg.thresholds.iou);
    if let Err(e) = cfg.split.ratios.validate() {
        errors.push(ValidationError::Invalid { field: "split.ratios".into(), message: e.to_string() });
    }
    if cfg.corpus.dpi == 0 {
        errors.push(ValidationError::OutOfRange { field: "corpus.dpi".into(), value: "0".into(), range: "[1, inf)" });
    }
    if cfg.corpus.max_pages == 0 {
        errors.push(ValidationError::OutOfRange { field: "corpus.max_pages".into(), value: "0".into(), range: "[1, inf)" });
    }
    if let Some(root) = &cfg.corpus.root {
        let manifest = root.join(MANIFEST_FILE);
        if !manifest.exists() {
            errors.push(ValidationError::MissingPath { field: "corpus.root".into(), path: manifest });
        }
    }
    existing(&mut errors, "thresholds.eval_report", cfg.thresholds.eval_report.as_ref());
    existing(&mut errors, "detector.weights", cfg.detector.weights.as_ref());
    existing(&mut errors, "classifier.weights", cfg.classifier.weights.as_ref());
    existing(&mut errors, "prompts", cfg.prompts.as_ref());

    match cfg.detector.kind {
        DetectorKind::Blob if cfg.detector.weights.is_none() => {
            errors.push(ValidationError::Missing { field: "detector.weights".into(), reason: "blob detector loads its trained state".into() })
        }
        _ => {}
    }
    let cmd = |k: bool| k.then_some("command");
    template(&mut errors, "detector.predict", cfg.detector.predict.as_ref(), cmd(cfg.detector.kind == DetectorKind::Command));
    template(&mut errors, "detector.train", cfg.detector.train.as_ref(), None);
    template(&mut errors, "classifier.predict", cfg.classifier.predict.as_ref(), cmd(cfg.classifier.kind == ClassifierKind::Command));
    template(&mut errors, "classifier.train", cfg.classifier.train.as_ref(), None);
    template(&mut errors, "scorer.command", cfg.scorer.command.as_ref(), cmd(cfg.scorer.kind == ScorerKind::Command));
    for (name, engine) in &cfg.ocr {
        template(&mut errors, &format!("ocr.{name}.command"), engine.command.as_ref(), cmd(engine.kind == OcrKind::Command));
    }
    if cfg.stages.ocr && cfg.ocr.is_empty() {
        errors.push(ValidationError::Missing { field: "ocr".into(), reason: "the OCR stage is enabled".into() });
    }

    let mut confidence_threshold = cfg.thresholds.confidence;
    if let Some(path) = cfg.thresholds.eval_report.as_ref().filter(|p| p.exists()) {
        match fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| {
            serde_json::from_str::<EvalReport<f64>>(&t).map_err(|e| e.to_string())
        }) {
            Ok(report) => confidence_threshold = report.best.threshold,
            Err(message) => errors.push(ValidationError::Invalid { field: "thresholds.eval_report".into(), message }),
        }
    }

    if !errors.is_empty() {
        return Err(ConfigError::Invalid(errors));
    }
    let hash = config_hash(&cfg);
    Ok(ValidatedConfig { config: cfg, hash, confidence_threshold })
}
