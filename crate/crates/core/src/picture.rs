//! Picture crop subclassification and zero-shot description of
//! illustrations against a list of text prompts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::LayoutClass;
use crate::command::CommandTemplate;
use crate::detection::{BackendCapabilities, BackendError, Crop, Hyperparams};

/// Subclasses of the Picture layout class. Heavily decorated initials are
/// folded into `Illustration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PictureSubclass {
    #[serde(rename = "Decorative_letter")]
    DecorativeLetter,
    Illustration,
    Other,
    Stamp,
    #[serde(rename = "Wrong_detection")]
    WrongDetection,
}

impl PictureSubclass {
    pub const COUNT: usize = 5;
    pub const ALL: [PictureSubclass; 5] = [
        PictureSubclass::DecorativeLetter,
        PictureSubclass::Illustration,
        PictureSubclass::Other,
        PictureSubclass::Stamp,
        PictureSubclass::WrongDetection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PictureSubclass::DecorativeLetter => "Decorative_letter",
            PictureSubclass::Illustration => "Illustration",
            PictureSubclass::Other => "Other",
            PictureSubclass::Stamp => "Stamp",
            PictureSubclass::WrongDetection => "Wrong_detection",
        }
    }
}

impl fmt::Display for PictureSubclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PictureSubclass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PictureSubclass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown picture subclass '{s}'"))
    }
}

/// Normalized exponentials. Entries of `-inf` get probability 0.
pub fn softmax(logits: &[f64; PictureSubclass::COUNT]) -> [f64; PictureSubclass::COUNT] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - max).exp());
    let sum: f64 = exps.iter().sum();
    exps.map(|e| e / sum)
}

fn check_logits(logits: &[f64; PictureSubclass::COUNT]) -> Result<(), BackendError> {
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) || logits.iter().all(|l| !l.is_finite()) {
        return Err(BackendError::Output(format!("invalid logits {logits:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclassPrediction {
    pub crop: String,
    pub subclass: PictureSubclass,
    pub probabilities: BTreeMap<PictureSubclass, f64>,
}

impl SubclassPrediction {
    /// Builds a prediction from raw scores; ties go to the earlier subclass.
    pub fn from_logits(crop: impl Into<String>, logits: &[f64; PictureSubclass::COUNT]) -> Self {
        let probs = softmax(logits);
        let mut best = 0;
        for i in 1..probs.len() {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Self {
            crop: crop.into(),
            subclass: PictureSubclass::ALL[best],
            probabilities: PictureSubclass::ALL.into_iter().zip(probs).collect(),
        }
    }

    pub fn probability(&self, subclass: PictureSubclass) -> f64 {
        self.probabilities.get(&subclass).copied().unwrap_or(0.0)
    }
}

/// One row per prediction: crop, subclass, then a probability column per subclass.
pub fn predictions_csv(predictions: &[SubclassPrediction]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["crop".to_string(), "subclass".to_string()];
    header.extend(PictureSubclass::ALL.iter().map(|s| format!("p_{s}")));
    w.write_record(&header).expect("in-memory csv");
    for p in predictions {
        let mut row = vec![p.crop.clone(), p.subclass.to_string()];
        row.extend(PictureSubclass::ALL.iter().map(|s| p.probability(*s).to_string()));
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// Adapter over a concrete image classifier.
pub trait PictureClassifier: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    fn train(&mut self, examples: &[(PathBuf, PictureSubclass)], hyperparams: &Hyperparams) -> Result<(), BackendError>;

    /// Unnormalized scores in [`PictureSubclass::ALL`] order.
    fn logits(&self, image: &Path) -> Result<[f64; PictureSubclass::COUNT], BackendError>;

    fn save(&self, _path: &Path) -> Result<(), BackendError> {
        Err(BackendError::Unsupported(format!("{} cannot save its state", self.capabilities().model_name)))
    }
}

/// Fixed logits, optionally overridden per crop file name. Training is a no-op.
#[derive(Debug, Clone, Default)]
pub struct StubClassifier {
    logits: [f64; PictureSubclass::COUNT],
    by_file: BTreeMap<String, [f64; PictureSubclass::COUNT]>,
}

impl StubClassifier {
    pub fn new(logits: [f64; PictureSubclass::COUNT]) -> Self {
        Self { logits, by_file: BTreeMap::new() }
    }

    /// Logits favoring one subclass.
    pub fn favoring(subclass: PictureSubclass) -> Self {
        let mut logits = [0.0; PictureSubclass::COUNT];
        logits[subclass.index()] = 4.0;
        Self::new(logits)
    }

    pub fn with_file(mut self, file_name: impl Into<String>, subclass: PictureSubclass) -> Self {
        let mut logits = [0.0; PictureSubclass::COUNT];
        logits[subclass.index()] = 4.0;
        self.by_file.insert(file_name.into(), logits);
        self
    }
}

impl PictureClassifier for StubClassifier {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { trainable: true, model_name: "stub-classifier".into() }
    }

    fn train(&mut self, _: &[(PathBuf, PictureSubclass)], _: &Hyperparams) -> Result<(), BackendError> {
        Ok(())
    }

    fn logits(&self, image: &Path) -> Result<[f64; PictureSubclass::COUNT], BackendError> {
        let key = image.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(*self.by_file.get(&key).unwrap_or(&self.logits))
    }
}

const FEATURES: usize = 10;

/// Color and texture statistics of a crop, each roughly in [0, 1].
fn features(img: &RgbImage) -> [f64; FEATURES] {
    let (w, h) = img.dimensions();
    let stride = (w.max(h) / 256).max(1);
    let lum = |x: u32, y: u32| {
        let p = img.get_pixel(x, y).0;
        (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
    };
    let (mut sum, mut sq) = ([0.0f64; 3], [0.0f64; 3]);
    let (mut gx, mut gy, mut sat, mut center, mut total_lum) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut n, mut nc) = (0usize, 0usize);
    for y in (0..h).step_by(stride as usize) {
        for x in (0..w).step_by(stride as usize) {
            let p = img.get_pixel(x, y).0.map(|c| c as f64 / 255.0);
            for c in 0..3 {
                sum[c] += p[c];
                sq[c] += p[c] * p[c];
            }
            sat += p.iter().copied().fold(0.0, f64::max) - p.iter().copied().fold(1.0, f64::min);
            let l = lum(x, y);
            total_lum += l;
            if x + 1 < w {
                gx += (lum(x + 1, y) - l).abs();
            }
            if y + 1 < h {
                gy += (lum(x, y + 1) - l).abs();
            }
            if x >= w / 4 && x < w - w / 4 && y >= h / 4 && y < h - h / 4 {
                center += l;
                nc += 1;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let mut f = [0.0; FEATURES];
    for c in 0..3 {
        f[c] = mean[c];
        f[3 + c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    f[6] = gx / n;
    f[7] = gy / n;
    f[8] = sat / n;
    f[9] = center / nc.max(1) as f64 - total_lum / n;
    f
}

fn read_rgb(path: &Path) -> Result<RgbImage, BackendError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Nearest-centroid classifier over standardized color/texture features;
/// logits are negative squared distances divided by `temperature`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CentroidClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    centroids: BTreeMap<PictureSubclass, Vec<f64>>,
    temperature: f64,
}

impl CentroidClassifier {
    pub fn new() -> Self {
        Self { temperature: 1.0, ..Self::default() }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| BackendError::Output(format!("{}: {e}", path.display())))
    }

    fn standardize(&self, f: &[f64; FEATURES]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

impl PictureClassifier for CentroidClassifier {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { trainable: true, model_name: "centroid-classifier".into() }
    }

    fn train(&mut self, examples: &[(PathBuf, PictureSubclass)], hyperparams: &Hyperparams) -> Result<(), BackendError> {
        if let Some(t) = hyperparams.get("temperature") {
            self.temperature = t
                .parse::<f64>()
                .ok()
                .filter(|t| *t > 0.0)
                .ok_or_else(|| BackendError::Unsupported(format!("temperature must be a positive number, got '{t}'")))?;
        }
        let feats = examples
            .iter()
            .map(|(p, s)| Ok((features(&read_rgb(p)?), *s)))
            .collect::<Result<Vec<_>, BackendError>>()?;
        if feats.is_empty() {
            return Err(BackendError::Output("no training examples".into()));
        }
        let n = feats.len() as f64;
        self.mean = (0..FEATURES).map(|i| feats.iter().map(|(f, _)| f[i]).sum::<f64>() / n).collect();
        self.scale = (0..FEATURES)
            .map(|i| {
                let var = feats.iter().map(|(f, _)| (f[i] - self.mean[i]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-6)
            })
            .collect();
        let mut sums: BTreeMap<PictureSubclass, (Vec<f64>, usize)> = BTreeMap::new();
        for (f, s) in &feats {
            let z = self.standardize(f);
            let entry = sums.entry(*s).or_insert_with(|| (vec![0.0; FEATURES], 0));
            entry.0.iter_mut().zip(z).for_each(|(a, b)| *a += b);
            entry.1 += 1;
        }
        self.centroids = sums.into_iter().map(|(s, (v, k))| (s, v.into_iter().map(|x| x / k as f64).collect())).collect();
        Ok(())
    }

    fn logits(&self, image: &Path) -> Result<[f64; PictureSubclass::COUNT], BackendError> {
        if self.centroids.is_empty() {
            return Err(BackendError::Untrained);
        }
        let z = self.standardize(&features(&read_rgb(image)?));
        Ok(PictureSubclass::ALL.map(|s| match self.centroids.get(&s) {
            Some(c) => -c.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.temperature,
            None => f64::NEG_INFINITY,
        }))
    }

    fn save(&self, path: &Path) -> Result<(), BackendError> {
        let json = serde_json::to_string_pretty(self).expect("classifier state serializes");
        fs::write(path, json).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })
    }
}

/// Classifier run as a subprocess.
///
/// `predict` receives `{image}`, `{weights}` and `{model}` and prints a JSON
/// object mapping subclass names to scores. `train` additionally receives
/// `{data}`, a JSON list of `{"path", "label"}` objects written next to the
/// weights, and each hyperparameter by name.
#[derive(Debug, Clone)]
pub struct CommandClassifier {
    model_name: String,
    predict: CommandTemplate,
    train: Option<CommandTemplate>,
    weights: Option<PathBuf>,
}

impl CommandClassifier {
    pub fn new(model_name: impl Into<String>, predict: CommandTemplate, train: Option<CommandTemplate>, weights: Option<PathBuf>) -> Self {
        Self { model_name: model_name.into(), predict, train, weights }
    }

    fn base_vars(&self) -> BTreeMap<&str, String> {
        let mut vars = BTreeMap::from([("model", self.model_name.clone())]);
        if let Some(w) = &self.weights {
            vars.insert("weights", w.display().to_string());
        }
        vars
    }
}

#[derive(Serialize)]
struct TrainItem<'a> {
    path: &'a Path,
    label: PictureSubclass,
}

impl PictureClassifier for CommandClassifier {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { trainable: self.train.is_some(), model_name: self.model_name.clone() }
    }

    fn train(&mut self, examples: &[(PathBuf, PictureSubclass)], hyperparams: &Hyperparams) -> Result<(), BackendError> {
        let template = self.train.as_ref().ok_or_else(|| BackendError::Unsupported(format!("{} has no train command", self.model_name)))?;
        let weights = self.weights.as_ref().ok_or_else(|| BackendError::Unsupported("training requires a weights path".into()))?;
        let data = weights.with_extension("train.json");
        let items: Vec<TrainItem> = examples.iter().map(|(path, label)| TrainItem { path, label: *label }).collect();
        fs::write(&data, serde_json::to_string(&items).expect("train list serializes"))
            .map_err(|source| BackendError::Io { path: data.clone(), source })?;
        let mut vars = self.base_vars();
        vars.insert("data", data.display().to_string());
        for (k, v) in hyperparams {
            vars.insert(k.as_str(), v.clone());
        }
        template.run(&vars)?;
        Ok(())
    }

    fn logits(&self, image: &Path) -> Result<[f64; PictureSubclass::COUNT], BackendError> {
        let mut vars = self.base_vars();
        vars.insert("image", image.display().to_string());
        let out = self.predict.run(&vars)?;
        parse_scores(&out)
    }
}

fn parse_scores(out: &str) -> Result<[f64; PictureSubclass::COUNT], BackendError> {
    let map: BTreeMap<PictureSubclass, f64> = serde_json::from_str(out.trim()).map_err(|e| BackendError::Output(e.to_string()))?;
    Ok(PictureSubclass::ALL.map(|s| map.get(&s).copied().unwrap_or(f64::NEG_INFINITY)))
}

#[derive(Debug, Error)]
pub enum PictureError {
    #[error("crop {crop} has class {class}; only Picture crops are subclassified")]
    NotPicture { crop: String, class: LayoutClass },
    #[error("crop {crop} is {subclass}; only Illustration crops are described")]
    NotIllustration { crop: String, subclass: PictureSubclass },
    #[error("prompt list is empty")]
    EmptyPrompts,
    #[error("training needs at least two subclasses with examples, got {0}")]
    TooFewClasses(usize),
    #[error("backend '{0}' is not trainable")]
    NotTrainable(String),
    #[error("unreadable crop {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("crop {crop}: {source}")]
    Backend { crop: String, source: BackendError },
    #[error("training failed: {0}")]
    Training(BackendError),
    #[error("prompts {path}: {message}")]
    Prompts { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Example crop paths per subclass.
pub type LabeledCrops = BTreeMap<PictureSubclass, Vec<PathBuf>>;

/// Reads `dir/<Subclass>/*.png`; the directory name is the label.
pub fn load_labeled_crops(dir: &Path) -> Result<LabeledCrops, PictureError> {
    let mut out = LabeledCrops::new();
    for s in PictureSubclass::ALL {
        let sub = dir.join(s.name());
        let entries = match fs::read_dir(&sub) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(source) => return Err(PictureError::Io { path: sub, source }),
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if !paths.is_empty() {
            out.insert(s, paths);
        }
    }
    Ok(out)
}

/// `correct / total`, or `None` for an empty split.
pub fn accuracy(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutReport {
    pub seed: u64,
    pub train_count: usize,
    pub correct: usize,
    pub total: usize,
    /// `None` when no class had enough examples to hold one out.
    pub accuracy: Option<f64>,
}

/// A classifier whose training (if any) is finished.
pub struct TrainedSubclassifier {
    backend: Box<dyn PictureClassifier>,
}

impl fmt::Debug for TrainedSubclassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainedSubclassifier").field("capabilities", &self.backend.capabilities()).finish()
    }
}

impl TrainedSubclassifier {
    pub fn pretrained(backend: Box<dyn PictureClassifier>) -> Self {
        Self { backend }
    }

    pub fn backend(&self) -> &dyn PictureClassifier {
        self.backend.as_ref()
    }

    /// Subclass prediction for an image file.
    pub fn predict_path(&self, crop_id: &str, path: &Path) -> Result<SubclassPrediction, PictureError> {
        let backend_err = |source| PictureError::Backend { crop: crop_id.to_string(), source };
        let logits = self.backend.logits(path).map_err(backend_err)?;
        check_logits(&logits).map_err(backend_err)?;
        Ok(SubclassPrediction::from_logits(crop_id, &logits))
    }
}

/// Trains on a seeded 80/20 split, stratified by subclass, and scores the
/// held-out part.
pub fn train_subclassifier(
    mut backend: Box<dyn PictureClassifier>,
    crops: &LabeledCrops,
    hyperparams: &Hyperparams,
    seed: u64,
) -> Result<(TrainedSubclassifier, HeldOutReport), PictureError> {
    let present = crops.values().filter(|v| !v.is_empty()).count();
    if present < 2 {
        return Err(PictureError::TooFewClasses(present));
    }
    let caps = backend.capabilities();
    if !caps.trainable {
        return Err(PictureError::NotTrainable(caps.model_name));
    }
    for path in crops.values().flatten() {
        image::image_dimensions(path).map_err(|e| PictureError::Unreadable { path: path.clone(), message: e.to_string() })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (subclass, paths) in crops {
        let mut paths = paths.clone();
        paths.shuffle(&mut rng);
        let k = (paths.len() as f64 * HELD_OUT_FRACTION + 1e-9).floor() as usize;
        held.extend(paths[..k].iter().map(|p| (p.clone(), *subclass)));
        train.extend(paths[k..].iter().map(|p| (p.clone(), *subclass)));
    }
    backend.train(&train, hyperparams).map_err(PictureError::Training)?;
    let state = TrainedSubclassifier { backend };
    let mut correct = 0;
    for (path, truth) in &held {
        let id = path.file_stem().unwrap_or_default().to_string_lossy();
        if state.predict_path(&id, path)?.subclass == *truth {
            correct += 1;
        }
    }
    let report = HeldOutReport { seed, train_count: train.len(), correct, total: held.len(), accuracy: accuracy(correct, held.len()) };
    Ok((state, report))
}

pub fn classify_crop(state: &TrainedSubclassifier, crop: &Crop) -> Result<SubclassPrediction, PictureError> {
    if crop.class != LayoutClass::Picture {
        return Err(PictureError::NotPicture { crop: crop.id(), class: crop.class });
    }
    state.predict_path(&crop.id(), &crop.path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionPrompt {
    pub text: String,
    pub index: usize,
}

pub const DEFAULT_PROMPTS: [&str; 8] = [
    "religious scene",
    "astrology or alchemy",
    "medieval engraving",
    "Renaissance-style illustration",
    "magic and divination",
    "printer's ornament",
    "decorative book illustration",
    "mathematics",
];

pub fn prompts_from<S: AsRef<str>>(texts: &[S]) -> Vec<DescriptionPrompt> {
    texts.iter().enumerate().map(|(index, t)| DescriptionPrompt { text: t.as_ref().to_string(), index }).collect()
}

pub fn default_prompts() -> Vec<DescriptionPrompt> {
    prompts_from(&DEFAULT_PROMPTS)
}

/// Reads a JSON list of prompt strings.
pub fn load_prompts(path: &Path) -> Result<Vec<DescriptionPrompt>, PictureError> {
    let text = fs::read_to_string(path).map_err(|source| PictureError::Io { path: path.to_path_buf(), source })?;
    let list: Vec<String> =
        serde_json::from_str(&text).map_err(|e| PictureError::Prompts { path: path.to_path_buf(), message: e.to_string() })?;
    if list.is_empty() {
        return Err(PictureError::EmptyPrompts);
    }
    Ok(prompts_from(&list))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt: DescriptionPrompt,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMatch {
    pub crop: String,
    /// Descending score, ties by prompt index.
    pub ranked: Vec<PromptScore>,
    pub top: DescriptionPrompt,
}

/// Image-text similarity. Scores are used raw, without normalization.
pub trait ImageTextScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &Path, prompts: &[DescriptionPrompt]) -> Result<Vec<f64>, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum StubScores {
    /// Score equals the prompt index.
    Index,
    /// The same score for every prompt.
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct StubScorer {
    pub mode: StubScores,
}

impl ImageTextScorer for StubScorer {
    fn name(&self) -> &str {
        "stub-scorer"
    }

    fn score(&self, _: &Path, prompts: &[DescriptionPrompt]) -> Result<Vec<f64>, BackendError> {
        Ok(prompts
            .iter()
            .map(|p| match self.mode {
                StubScores::Index => p.index as f64,
                StubScores::Constant(c) => c,
            })
            .collect())
    }
}

/// Scorer run as a subprocess: `{image}` and `{prompts}` (a JSON list of
/// strings, passed as one argument); prints a JSON list of numbers.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    name: String,
    template: CommandTemplate,
}

impl CommandScorer {
    pub fn new(name: impl Into<String>, template: CommandTemplate) -> Self {
        Self { name: name.into(), template }
    }
}

impl ImageTextScorer for CommandScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, image: &Path, prompts: &[DescriptionPrompt]) -> Result<Vec<f64>, BackendError> {
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        let vars = BTreeMap::from([
            ("image", image.display().to_string()),
            ("prompts", serde_json::to_string(&texts).expect("strings serialize")),
        ]);
        let out = self.template.run(&vars)?;
        serde_json::from_str(out.trim()).map_err(|e| BackendError::Output(e.to_string()))
    }
}

/// Ranks `prompts` by the scorer's similarity to an Illustration crop.
pub fn describe_illustration(
    scorer: &dyn ImageTextScorer,
    crop: &Crop,
    subclass: PictureSubclass,
    prompts: &[DescriptionPrompt],
) -> Result<SemanticMatch, PictureError> {
    if prompts.is_empty() {
        return Err(PictureError::EmptyPrompts);
    }
    if crop.class != LayoutClass::Picture {
        return Err(PictureError::NotPicture { crop: crop.id(), class: crop.class });
    }
    if subclass != PictureSubclass::Illustration {
        return Err(PictureError::NotIllustration { crop: crop.id(), subclass });
    }
    let backend_err = |source| PictureError::Backend { crop: crop.id(), source };
    let scores = scorer.score(&crop.path, prompts).map_err(backend_err)?;
    if scores.len() != prompts.len() || scores.iter().any(|s| s.is_nan()) {
        return Err(backend_err(BackendError::Output(format!("expected {} finite scores, got {scores:?}", prompts.len()))));
    }
    let mut ranked: Vec<PromptScore> = prompts.iter().cloned().zip(scores).map(|(prompt, score)| PromptScore { prompt, score }).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.prompt.index.cmp(&b.prompt.index)));
    Ok(SemanticMatch { crop: crop.id(), top: ranked[0].prompt.clone(), ranked })
}
