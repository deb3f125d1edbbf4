//! `incunabula` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 run
//! finished with partial pages, 3 fatal error (I/O, unreadable inputs).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use incunabula::annotation::{split_dataset, split_dataset_by_document, write_labels, PageAnnotation, SplitRatios};
use incunabula::config::{load_config, validate_config, ConfigError, ValidatedConfig};
use incunabula::corpus::{build_corpus, DatasetManifest, ScanPdfRenderer, SourceDocument, MANIFEST_FILE};
use incunabula::detection::{
    detect_page, extract_crops, filter_detections, train_detector, BlobDetector, BlobDetectorParams, Crop, DetectionDataset,
    DetectorBackend, Hyperparams, PageDetections, StubDetector, TrainingStrategy,
};
use incunabula::doclaynet::{default_remap, parse_coco, remap_dataset};
use incunabula::evaluation::{f1_confidence_curve, render_report, Aggregation, EvalOptions, EvalReport};
use incunabula::ocr::{compare_engines, run_ocr, ReferenceSample};
use incunabula::picture::{
    classify_crop, describe_illustration, load_labeled_crops, predictions_csv, train_subclassifier, CentroidClassifier,
    PictureClassifier, PictureSubclass, StubClassifier,
};
use incunabula::pipeline::{emit_records, run_from_config, Backends, PageStatus, RecordFormat};
use incunabula::LayoutClass;

#[derive(Parser)]
#[command(name = "incunabula", version, about = "Layout analysis for scanned early printed books")]
struct Cli {
    /// Pipeline configuration (TOML). INCUNABULA_* variables override keys.
    #[arg(long, global = true, env = "INCUNABULA_CONFIG")]
    config: Option<PathBuf>,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render scan PDFs to page images and write the corpus manifest.
    Ingest(IngestArgs),
    /// Convert a COCO layout dataset to the five-class label format.
    Remap(RemapArgs),
    /// Assign corpus pages to train/val/test.
    Split(SplitArgs),
    /// Train a detector or the picture subclassifier.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Run the configured detector over the corpus.
    Detect(DetectArgs),
    /// Cut detected regions out of their pages.
    Crop(CropArgs),
    /// Recognize text crops with every configured engine.
    Ocr(OcrArgs),
    /// Subclassify picture crops.
    Classify(ClassifyArgs),
    /// Rank description prompts for crops classified as illustrations.
    Describe(DescribeArgs),
    /// Compute the F1-confidence curve of detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline and emit page records.
    Run(RunArgs),
    /// Summarize one or more evaluation reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Source documents as ID=PATH.
    #[arg(long = "doc", value_name = "ID=PATH")]
    docs: Vec<String>,
    /// Every *.pdf in this directory, with the file stem as document id.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Corpus root (defaults to corpus.root from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dpi: Option<u32>,
    #[arg(long)]
    max_pages: Option<u32>,
}

#[derive(Args)]
struct RemapArgs {
    /// COCO JSON file.
    #[arg(long)]
    coco: PathBuf,
    /// Output directory for labels/ and remap_report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// TRAIN,VAL,TEST fractions.
    #[arg(long, value_parser = parse_ratios)]
    ratios: Option<SplitRatios>,
    /// Apply the ratios inside each document.
    #[arg(long)]
    by_document: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TrainCommand {
    Detector(TrainDetectorArgs),
    Subclassifier(TrainSubclassifierArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorChoice {
    Stub,
    Blob,
    /// The command backend from the config.
    Command,
}

#[derive(Args)]
struct TrainDetectorArgs {
    #[arg(long, value_enum, default_value = "blob")]
    backend: DetectorChoice,
    /// `pretrain-then-finetune` (1) or `custom-only` (2).
    #[arg(long, default_value = "custom-only")]
    strategy: TrainingStrategy,
    /// Custom dataset directory (images/ + labels/).
    #[arg(long)]
    custom: PathBuf,
    /// External dataset directory, for pretrain-then-finetune.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Where the trained state is saved.
    #[arg(long)]
    weights: PathBuf,
    /// Hyperparameters as KEY=VALUE.
    #[arg(long = "hp", value_name = "KEY=VALUE")]
    hyperparams: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassifierChoice {
    Stub,
    Centroid,
}

#[derive(Args)]
struct TrainSubclassifierArgs {
    #[arg(long, value_enum, default_value = "centroid")]
    backend: ClassifierChoice,
    /// Directory with one subdirectory of PNG crops per subclass.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "hp", value_name = "KEY=VALUE")]
    hyperparams: Vec<String>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Drop detections below this confidence (default keeps all).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CropArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    detections: PathBuf,
    /// Crops root; crops.json is written here.
    #[arg(long)]
    out: PathBuf,
    /// Classes to crop (default all).
    #[arg(long = "class")]
    classes: Vec<LayoutClass>,
    /// Confidence threshold (default from config).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    pad: Option<u32>,
}

#[derive(Args)]
struct OcrArgs {
    /// crops.json from `crop`.
    #[arg(long)]
    crops: PathBuf,
    /// JSON object of crop id to reference transcription.
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    crops: PathBuf,
    /// Output directory for subclasses.json and subclasses.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    crops: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Detections JSON from `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Dataset directory with images/ and labels/.
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, default_value = "model")]
    model_id: String,
    #[arg(long)]
    strategy: Option<TrainingStrategy>,
    #[arg(long)]
    iou: Option<f64>,
    /// Average per-page F1 instead of pooling counts.
    #[arg(long)]
    macro_average: bool,
    /// Output directory for report.json and curve.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    format: FormatChoice,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatChoice {
    Json,
    Csv,
    Both,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files from `evaluate`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Fatal(String),
}

type Outcome = Result<ExitCode, Failure>;

fn fatal(e: impl std::fmt::Display) -> Failure {
    Failure::Fatal(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn config_failure(e: ConfigError) -> Failure {
    match e {
        ConfigError::Io { .. } => fatal(e),
        _ => invalid(e),
    }
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [train, val, test] => Ok(SplitRatios { train, val, test }),
        _ => Err("expected TRAIN,VAL,TEST".into()),
    }
}

fn parse_hyperparams(items: &[String]) -> Result<Hyperparams, Failure> {
    items
        .iter()
        .map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| invalid(format!("'{kv}' is not KEY=VALUE"))))
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| fatal(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fatal(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_file(path, serde_json::to_string_pretty(value).map_err(fatal)?)
}

struct Context {
    config_path: Option<PathBuf>,
}

impl Context {
    fn config(&self) -> Result<ValidatedConfig, Failure> {
        let cfg = load_config(self.config_path.as_deref()).map_err(config_failure)?;
        validate_config(cfg).map_err(config_failure)
    }

    fn backends(&self, cfg: &ValidatedConfig) -> Result<Backends, Failure> {
        Backends::from_config(&cfg.config).map_err(config_failure)
    }

    fn corpus_root(&self, cfg: &ValidatedConfig, arg: Option<PathBuf>) -> Result<PathBuf, Failure> {
        arg.or_else(|| cfg.config.corpus.root.clone())
            .ok_or_else(|| invalid("no corpus: pass --corpus or set corpus.root"))
    }

    fn manifest(&self, cfg: &ValidatedConfig, arg: Option<PathBuf>) -> Result<DatasetManifest, Failure> {
        let root = self.corpus_root(cfg, arg)?;
        DatasetManifest::load(&root.join(MANIFEST_FILE)).map_err(fatal)
    }
}

fn ingest(ctx: &Context, args: IngestArgs) -> Outcome {
    let cfg = ctx.config()?;
    let out = ctx.corpus_root(&cfg, args.out)?;
    let mut sources: Vec<(String, PathBuf)> = Vec::new();
    for d in &args.docs {
        let (id, path) = d.split_once('=').ok_or_else(|| invalid(format!("--doc '{d}' is not ID=PATH")))?;
        sources.push((id.to_string(), PathBuf::from(path)));
    }
    if let Some(dir) = &args.input_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| fatal(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pdf")))
            .collect();
        found.sort();
        for p in found {
            sources.push((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p));
        }
    }
    if sources.is_empty() {
        return Err(invalid("nothing to ingest: pass --doc or --input-dir"));
    }
    let renderer = ScanPdfRenderer;
    let docs = sources
        .iter()
        .map(|(id, path)| SourceDocument::open(id, path, &renderer))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fatal)?;
    let dpi = args.dpi.unwrap_or(cfg.config.corpus.dpi);
    let max_pages = args.max_pages.unwrap_or(cfg.config.corpus.max_pages);
    let manifest = build_corpus(&docs, max_pages, dpi, &out, &renderer).map_err(fatal)?;
    manifest.save(&out, &out.join(MANIFEST_FILE)).map_err(fatal)?;
    println!("{} pages from {} documents -> {}", manifest.len(), docs.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn remap(args: RemapArgs) -> Outcome {
    let text = fs::read_to_string(&args.coco).map_err(|e| fatal(format!("{}: {e}", args.coco.display())))?;
    let coco = parse_coco(&text).map_err(invalid)?;
    let output = remap_dataset::<f64>(&coco, &default_remap()).map_err(invalid)?;
    for image in &output.images {
        write_file(&args.out.join("labels").join(image.label_file_name()), write_labels(&image.annotation))?;
    }
    write_json(&args.out.join("remap_report.json"), &output.report)?;
    let r = &output.report;
    println!("{} -> {} regions ({} dropped, {} degenerate)", r.input_count, r.output_count, r.dropped_total(), r.degenerate_count);
    Ok(ExitCode::SUCCESS)
}

fn split(ctx: &Context, args: SplitArgs) -> Outcome {
    let cfg = ctx.config()?;
    let manifest = ctx.manifest(&cfg, args.corpus)?;
    let ratios = args.ratios.unwrap_or(cfg.config.split.ratios);
    let seed = args.seed.unwrap_or(cfg.config.split.seed);
    let assignment = if args.by_document || cfg.config.split.by_document {
        split_dataset_by_document(&manifest, ratios, seed)
    } else {
        split_dataset(&manifest, ratios, seed)
    }
    .map_err(invalid)?;
    write_json(&args.out, &assignment)?;
    use incunabula::Subset::*;
    println!("train={} val={} test={}", assignment.count(Train), assignment.count(Val), assignment.count(Test));
    Ok(ExitCode::SUCCESS)
}

fn train_detector_cmd(ctx: &Context, args: TrainDetectorArgs) -> Outcome {
    let hp = parse_hyperparams(&args.hyperparams)?;
    let backend: Box<dyn DetectorBackend> = match args.backend {
        DetectorChoice::Stub => Box::new(StubDetector::default()),
        DetectorChoice::Blob => Box::new(BlobDetector::new(BlobDetectorParams::default())),
        DetectorChoice::Command => {
            let cfg = ctx.config()?;
            let mut c = cfg.config;
            c.detector.kind = incunabula::config::DetectorKind::Command;
            c.detector.weights = Some(args.weights.clone());
            let b = Backends::from_config(&c).map_err(config_failure)?;
            return train_and_save(b.detector.into_backend(), &args, &hp);
        }
    };
    train_and_save(backend, &args, &hp)
}

fn train_and_save(backend: Box<dyn DetectorBackend>, args: &TrainDetectorArgs, hp: &Hyperparams) -> Outcome {
    let custom = DetectionDataset::load_dir(&args.custom).map_err(fatal)?;
    let external = args.external.as_deref().map(DetectionDataset::load_dir).transpose().map_err(fatal)?;
    let trained = train_detector(backend, args.strategy, external.as_ref(), &custom, hp).map_err(|e| match e {
        incunabula::detection::DetectionError::Config(_) | incunabula::detection::DetectionError::NotTrainable(_) => invalid(e),
        other => fatal(other),
    })?;
    match trained.backend().save(&args.weights) {
        Ok(()) => {}
        Err(incunabula::detection::BackendError::Unsupported(m)) => log::warn!("{m}"),
        Err(e) => return Err(fatal(e)),
    }
    let log_path = args.weights.with_extension("log.jsonl");
    write_file(&log_path, trained.log_jsonl())?;
    println!("trained {} ({} phases); state in {}", trained.capabilities().model_name, trained.log.len(), args.weights.display());
    Ok(ExitCode::SUCCESS)
}

fn train_subclassifier_cmd(args: TrainSubclassifierArgs) -> Outcome {
    let hp = parse_hyperparams(&args.hyperparams)?;
    let crops = load_labeled_crops(&args.labels).map_err(fatal)?;
    let backend: Box<dyn PictureClassifier> = match args.backend {
        ClassifierChoice::Stub => Box::new(StubClassifier::default()),
        ClassifierChoice::Centroid => Box::new(CentroidClassifier::new()),
    };
    let (state, report) = train_subclassifier(backend, &crops, &hp, args.seed).map_err(|e| match e {
        incunabula::picture::PictureError::TooFewClasses(_) => invalid(e),
        other => fatal(other),
    })?;
    match state.backend().save(&args.weights) {
        Ok(()) => {}
        Err(incunabula::detection::BackendError::Unsupported(m)) => log::warn!("{m}"),
        Err(e) => return Err(fatal(e)),
    }
    write_json(&args.weights.with_extension("heldout.json"), &report)?;
    match report.accuracy {
        Some(a) => println!("held-out accuracy {a:.4} ({}/{})", report.correct, report.total),
        None => println!("no held-out examples; accuracy undefined"),
    }
    Ok(ExitCode::SUCCESS)
}

fn detect(ctx: &Context, args: DetectArgs) -> Outcome {
    let cfg = ctx.config()?;
    let manifest = ctx.manifest(&cfg, args.corpus)?;
    let backends = ctx.backends(&cfg)?;
    let mut out = Vec::with_capacity(manifest.len());
    for page in &manifest.pages {
        let dets = detect_page(&backends.detector, page).map_err(fatal)?;
        let detections = match args.threshold {
            Some(t) => filter_detections(&dets, t),
            None => dets,
        };
        out.push(PageDetections { doc_id: page.doc_id.clone(), page_number: page.page_number, detections });
    }
    write_json(&args.out, &out)?;
    println!("{} detections on {} pages", out.iter().map(|p| p.detections.len()).sum::<usize>(), out.len());
    Ok(ExitCode::SUCCESS)
}

fn crop(ctx: &Context, args: CropArgs) -> Outcome {
    let cfg = ctx.config()?;
    let manifest = ctx.manifest(&cfg, args.corpus)?;
    let pages: Vec<PageDetections> = read_json(&args.detections)?;
    let classes = if args.classes.is_empty() { LayoutClass::ALL.to_vec() } else { args.classes };
    let threshold = args.threshold.unwrap_or(cfg.confidence_threshold);
    let pad = args.pad.unwrap_or(cfg.config.crop_pad);
    let mut crops: Vec<Crop> = Vec::new();
    for p in &pages {
        let page = manifest.find(&p.page_ref()).ok_or_else(|| fatal(format!("page {} is not in the corpus", p.page_ref())))?;
        let kept = filter_detections(&p.detections, threshold);
        crops.extend(extract_crops(page, &kept, &classes, pad, &args.out).map_err(fatal)?);
    }
    write_json(&args.out.join("crops.json"), &crops)?;
    println!("{} crops -> {}", crops.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn ocr(ctx: &Context, args: OcrArgs) -> Outcome {
    let cfg = ctx.config()?;
    let backends = ctx.backends(&cfg)?;
    let crops: Vec<Crop> = read_json(&args.crops)?;
    let textual: Vec<&Crop> = crops.iter().filter(|c| c.class.is_textual()).collect();
    let mut results = Vec::new();
    for crop in &textual {
        for engine in &backends.ocr {
            let r = run_ocr(crop, engine.as_ref()).map_err(fatal)?;
            write_file(&crop.path.with_extension(format!("{}.txt", r.engine)), &r.text)?;
            results.push(r);
        }
    }
    write_json(&args.out.join("ocr.json"), &results)?;
    if let Some(refs) = &args.references {
        let references: BTreeMap<String, String> = read_json(refs)?;
        let samples: Vec<ReferenceSample> =
            textual.iter().map(|c| ReferenceSample { crop: (*c).clone(), reference: references.get(&c.id()).cloned() }).collect();
        let engines: Vec<&dyn incunabula::ocr::OcrEngine> = backends.ocr.iter().map(|e| e.as_ref()).collect();
        let comparison = compare_engines(&samples, &engines).map_err(fatal)?;
        write_json(&args.out.join("comparison.json"), &comparison)?;
        write_file(&args.out.join("comparison.csv"), comparison.summary_csv())?;
        for (i, s) in comparison.ranking.iter().enumerate() {
            println!("{}. {} CER={:.4} WER={:.4} ({} crops)", i + 1, s.engine, s.mean_cer, s.mean_wer, s.crops);
        }
    }
    println!("{} transcriptions of {} crops", results.len(), textual.len());
    Ok(ExitCode::SUCCESS)
}

fn pictures(crops: &[Crop]) -> Vec<&Crop> {
    crops.iter().filter(|c| c.class == LayoutClass::Picture).collect()
}

fn classify(ctx: &Context, args: ClassifyArgs) -> Outcome {
    let cfg = ctx.config()?;
    let backends = ctx.backends(&cfg)?;
    let crops: Vec<Crop> = read_json(&args.crops)?;
    let predictions = pictures(&crops)
        .into_iter()
        .map(|c| classify_crop(&backends.classifier, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fatal)?;
    write_json(&args.out.join("subclasses.json"), &predictions)?;
    write_file(&args.out.join("subclasses.csv"), predictions_csv(&predictions))?;
    println!("{} picture crops classified", predictions.len());
    Ok(ExitCode::SUCCESS)
}

fn describe(ctx: &Context, args: DescribeArgs) -> Outcome {
    let cfg = ctx.config()?;
    let backends = ctx.backends(&cfg)?;
    let crops: Vec<Crop> = read_json(&args.crops)?;
    let mut matches = Vec::new();
    for crop in pictures(&crops) {
        let p = classify_crop(&backends.classifier, crop).map_err(fatal)?;
        if p.subclass != PictureSubclass::Illustration {
            continue;
        }
        matches.push(describe_illustration(backends.scorer.as_ref(), crop, p.subclass, &backends.prompts).map_err(fatal)?);
    }
    write_json(&args.out, &matches)?;
    println!("{} illustrations described", matches.len());
    Ok(ExitCode::SUCCESS)
}

fn evaluate(ctx: &Context, args: EvaluateArgs) -> Outcome {
    let cfg = ctx.config()?;
    let gt = DetectionDataset::load_dir(&args.ground_truth).map_err(fatal)?;
    let pages: Vec<PageDetections> = read_json(&args.detections)?;
    let by_page: BTreeMap<_, _> = pages.into_iter().map(|p| (p.page_ref(), p.detections)).collect();
    let annotations: Vec<PageAnnotation<f64>> = gt.samples.iter().map(|s| s.annotation.clone()).collect();
    let dets: Vec<_> = annotations.iter().map(|a| by_page.get(&a.page).cloned().unwrap_or_default()).collect();
    let options = EvalOptions {
        iou_threshold: args.iou.unwrap_or(cfg.config.thresholds.iou),
        aggregation: if args.macro_average { Aggregation::Macro } else { Aggregation::Micro },
    };
    if !(0.0..=1.0).contains(&options.iou_threshold) {
        return Err(invalid(format!("IoU threshold {} is outside [0, 1]", options.iou_threshold)));
    }
    let curve = f1_confidence_curve(&dets, &annotations, options, None).map_err(invalid)?;
    let report = EvalReport::from_curve(args.model_id, args.strategy, options, curve).map_err(invalid)?;
    write_json(&args.out.join("report.json"), &report)?;
    write_file(&args.out.join("curve.csv"), report.curve_csv())?;
    print!("{}", render_report(&[report]).text);
    Ok(ExitCode::SUCCESS)
}

fn run(ctx: &Context, args: RunArgs) -> Outcome {
    let mut cfg = load_config(ctx.config_path.as_deref()).map_err(config_failure)?;
    if let Some(c) = args.corpus {
        cfg.corpus.root = Some(c);
    }
    if let Some(o) = args.out {
        cfg.output = o;
    }
    let cfg = validate_config(cfg).map_err(config_failure)?;
    let (records, summary) = run_from_config(&cfg).map_err(|e| match e {
        incunabula::pipeline::PipelineError::NoCorpus | incunabula::pipeline::PipelineError::Config(_) => invalid(e),
        other => fatal(other),
    })?;
    let out = &cfg.config.output;
    if args.format != FormatChoice::Csv {
        emit_records(&records, out, RecordFormat::Json).map_err(fatal)?;
    }
    if args.format != FormatChoice::Json {
        emit_records(&records, out, RecordFormat::Csv).map_err(fatal)?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} pages ({} partial), {} detections, {} texts, {} pictures, {} described; config {}",
        summary.pages, summary.partial_pages, summary.detections_kept, summary.texts, summary.pictures, summary.described, &cfg.hash[..12]
    );
    if records.iter().any(|r| r.status == PageStatus::Partial) {
        for (page, f) in &summary.failures {
            eprintln!("{page}: {} failed: {}", f.stage, f.message);
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Outcome {
    let reports = args.reports.iter().map(|p| read_json::<EvalReport<f64>>(p)).collect::<Result<Vec<_>, _>>()?;
    let rendered = render_report(&reports);
    print!("{}", rendered.text);
    if let Some(out) = &args.out {
        write_json(out, &rendered)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let ctx = Context { config_path: cli.config };
    let outcome = match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Remap(a) => remap(a),
        Command::Split(a) => split(&ctx, a),
        Command::Train(TrainCommand::Detector(a)) => train_detector_cmd(&ctx, a),
        Command::Train(TrainCommand::Subclassifier(a)) => train_subclassifier_cmd(a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Crop(a) => crop(&ctx, a),
        Command::Ocr(a) => ocr(&ctx, a),
        Command::Classify(a) => classify(&ctx, a),
        Command::Describe(a) => describe(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Run(a) => run(&ctx, a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Fatal(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
