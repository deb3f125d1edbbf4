//! Detection evaluation: IoU-gated greedy matching, per-class F1, the
//! F1-confidence curve and operating-point selection.
//!
//! Greedy matching visits detections in descending confidence, so keeping
//! only detections with confidence `>= t` keeps a prefix of that order and
//! every match decision inside the prefix is unchanged. The curve is
//! therefore computed from one full matching pass per page plus prefix
//! counts, instead of re-matching at every threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{LayoutClass, PageAnnotation};
use crate::detection::{Detection, TrainingStrategy};
use crate::geometry::iou;
use crate::scalar::{cmp_scalar, Scalar};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth contains no regions; the F1 curve is undefined")]
    EmptyGroundTruth,
    #[error("{detections} detection pages but {ground_truth} ground-truth pages")]
    PageCountMismatch { detections: usize, ground_truth: usize },
    #[error("curve is empty")]
    EmptyCurve,
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn f1<T: Scalar>(&self) -> T {
        f1(self.tp, self.fp, self.fn_)
    }

    fn add(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Outcome of matching one page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub counts: [ClassCounts; LayoutClass::COUNT],
    /// `(detection index, ground-truth index)` into the inputs.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    pub fn class(&self, class: LayoutClass) -> ClassCounts {
        self.counts[class as usize]
    }
}

/// `2tp / (2tp + fp + fn)`, and 0 when nothing was predicted or expected.
pub fn f1<T: Scalar>(tp: usize, fp: usize, fn_: usize) -> T {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return T::zero();
    }
    T::from_count(2 * tp) / T::from_count(denom)
}

/// Indices of `dets` by descending confidence, ties in input order.
fn confidence_order<T: Scalar>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| cmp_scalar(dets[b].confidence, dets[a].confidence));
    order
}

/// Per-detection verdicts in confidence order: `(detection index, matched gt)`.
fn greedy_match<T: Scalar>(dets: &[Detection<T>], gts: &PageAnnotation<T>, iou_threshold: T) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.regions.len()];
    confidence_order(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, T)> = None;
            for (g, gt) in gts.regions.iter().enumerate() {
                if taken[g] || gt.class != det.class {
                    continue;
                }
                let overlap = iou(&det.bbox, &gt.bbox);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            let hit = best.map(|(g, _)| g);
            if let Some(g) = hit {
                taken[g] = true;
            }
            (d, hit)
        })
        .collect()
}

/// Greedy confidence-ordered matching of one page.
///
/// Each detection claims the unmatched same-class ground truth with the
/// highest IoU at or above `iou_threshold` (lowest index on IoU ties);
/// otherwise it is a false positive. Unclaimed ground truth are misses.
pub fn match_detections<T: Scalar>(dets: &[Detection<T>], gts: &PageAnnotation<T>, iou_threshold: T) -> MatchResult {
    let mut counts = [ClassCounts::default(); LayoutClass::COUNT];
    let mut pairs = Vec::new();
    for (d, hit) in greedy_match(dets, gts, iou_threshold) {
        let c = &mut counts[dets[d].class as usize];
        match hit {
            Some(g) => {
                c.tp += 1;
                pairs.push((d, g));
            }
            None => c.fp += 1,
        }
    }
    for gt in &gts.regions {
        counts[gt.class as usize].fn_ += 1;
    }
    for c in counts.iter_mut() {
        c.fn_ -= c.tp;
    }
    MatchResult { counts, pairs }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Sum counts over the corpus, then compute F1 once per class.
    #[default]
    Micro,
    /// Average per-page F1 over pages that contain the class.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions<T> {
    pub iou_threshold: T,
    pub aggregation: Aggregation,
}

impl<T: Scalar> Default for EvalOptions<T> {
    fn default() -> Self {
        Self { iou_threshold: T::lit(DEFAULT_IOU_THRESHOLD), aggregation: Aggregation::Micro }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPoint<T> {
    /// Ground-truth instances of the class in the corpus.
    pub gt: usize,
    #[serde(flatten)]
    pub counts: ClassCounts,
    pub f1: T,
}

/// One threshold of the sweep. `per_class` lists every class that occurs
/// in the ground truth or among kept detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1CurvePoint<T> {
    pub threshold: T,
    pub per_class: BTreeMap<LayoutClass, ClassPoint<T>>,
    /// Mean over classes with at least one ground-truth instance.
    pub mean_f1: T,
}

impl<T: Scalar> F1CurvePoint<T> {
    pub fn class_f1(&self, class: LayoutClass) -> Option<T> {
        self.per_class.get(&class).filter(|p| p.gt > 0).map(|p| p.f1)
    }
}

/// Default sweep: every distinct detection confidence plus 0 and 1, ascending.
pub fn default_thresholds<T: Scalar>(dets_per_page: &[Vec<Detection<T>>]) -> Vec<T> {
    let mut ts: Vec<T> = dets_per_page.iter().flatten().map(|d| d.confidence).collect();
    ts.push(T::zero());
    ts.push(T::one());
    ts.sort_by(|a, b| cmp_scalar(*a, *b));
    ts.dedup();
    ts
}

/// Per-page matching pass reduced to prefix counts along confidence order.
struct PageSweep<T> {
    /// Confidences in descending order.
    confidences: Vec<T>,
    /// `cumulative[k][c]` = (tp, kept) for class `c` among the first `k` detections.
    cumulative: Vec<[(usize, usize); LayoutClass::COUNT]>,
    gt: [usize; LayoutClass::COUNT],
}

impl<T: Scalar> PageSweep<T> {
    fn new(dets: &[Detection<T>], gts: &PageAnnotation<T>, iou_threshold: T) -> Self {
        let verdicts = greedy_match(dets, gts, iou_threshold);
        let mut cumulative = Vec::with_capacity(verdicts.len() + 1);
        let mut running = [(0usize, 0usize); LayoutClass::COUNT];
        cumulative.push(running);
        let mut confidences = Vec::with_capacity(verdicts.len());
        for (d, hit) in verdicts {
            let slot = &mut running[dets[d].class as usize];
            slot.0 += hit.is_some() as usize;
            slot.1 += 1;
            cumulative.push(running);
            confidences.push(dets[d].confidence);
        }
        let mut gt = [0usize; LayoutClass::COUNT];
        for r in &gts.regions {
            gt[r.class as usize] += 1;
        }
        Self { confidences, cumulative, gt }
    }

    fn counts_at(&self, threshold: T) -> [ClassCounts; LayoutClass::COUNT] {
        let kept = self.confidences.partition_point(|&c| c >= threshold);
        let row = &self.cumulative[kept];
        std::array::from_fn(|c| ClassCounts { tp: row[c].0, fp: row[c].1 - row[c].0, fn_: self.gt[c] - row[c].0 })
    }
}

/// Mean F1 as a function of the minimum kept confidence.
///
/// Pages pair up by index. `thresholds` must be ascending; `None` sweeps
/// [`default_thresholds`].
pub fn f1_confidence_curve<T: Scalar>(
    dets_per_page: &[Vec<Detection<T>>],
    gts_per_page: &[PageAnnotation<T>],
    options: EvalOptions<T>,
    thresholds: Option<&[T]>,
) -> Result<Vec<F1CurvePoint<T>>, EvalError> {
    if dets_per_page.len() != gts_per_page.len() {
        return Err(EvalError::PageCountMismatch { detections: dets_per_page.len(), ground_truth: gts_per_page.len() });
    }
    if gts_per_page.iter().all(|g| g.regions.is_empty()) {
        return Err(EvalError::EmptyGroundTruth);
    }
    let thresholds = match thresholds {
        Some(ts) => {
            if ts.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(EvalError::UnsortedThresholds);
            }
            ts.to_vec()
        }
        None => default_thresholds(dets_per_page),
    };
    let sweeps: Vec<PageSweep<T>> = dets_per_page
        .iter()
        .zip(gts_per_page)
        .map(|(d, g)| PageSweep::new(d, g, options.iou_threshold))
        .collect();

    Ok(thresholds
        .into_iter()
        .map(|t| {
            let pages: Vec<[ClassCounts; LayoutClass::COUNT]> = sweeps.iter().map(|s| s.counts_at(t)).collect();
            curve_point(t, &pages, options.aggregation)
        })
        .collect())
}

fn curve_point<T: Scalar>(threshold: T, pages: &[[ClassCounts; LayoutClass::COUNT]], aggregation: Aggregation) -> F1CurvePoint<T> {
    let mut per_class = BTreeMap::new();
    let mut sum = T::zero();
    let mut present = 0usize;
    for class in LayoutClass::ALL {
        let c = class as usize;
        let mut total = ClassCounts::default();
        for page in pages {
            total.add(&page[c]);
        }
        let gt = total.tp + total.fn_;
        if gt == 0 && total.fp == 0 {
            continue;
        }
        let f1_value = match aggregation {
            Aggregation::Micro => total.f1(),
            Aggregation::Macro => {
                let with_gt: Vec<T> = pages.iter().filter(|p| p[c].tp + p[c].fn_ > 0).map(|p| p[c].f1()).collect();
                if with_gt.is_empty() {
                    T::zero()
                } else {
                    with_gt.iter().fold(T::zero(), |a, &b| a + b) / T::from_count(with_gt.len())
                }
            }
        };
        if gt > 0 {
            sum += f1_value;
            present += 1;
        }
        per_class.insert(class, ClassPoint { gt, counts: total, f1: f1_value });
    }
    let mean_f1 = if present == 0 { T::zero() } else { sum / T::from_count(present) };
    F1CurvePoint { threshold, per_class, mean_f1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint<T> {
    pub threshold: T,
    pub mean_f1: T,
}

/// Highest mean F1; ties go to the highest threshold.
pub fn best_operating_point<T: Scalar>(curve: &[F1CurvePoint<T>]) -> Result<OperatingPoint<T>, EvalError> {
    let mut best: Option<&F1CurvePoint<T>> = None;
    for p in curve {
        best = match best {
            Some(b) if p.mean_f1 < b.mean_f1 || (p.mean_f1 == b.mean_f1 && p.threshold < b.threshold) => Some(b),
            _ => Some(p),
        };
    }
    best.map(|p| OperatingPoint { threshold: p.threshold, mean_f1: p.mean_f1 }).ok_or(EvalError::EmptyCurve)
}

/// Everything known about one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<T> {
    pub model_id: String,
    #[serde(default)]
    pub strategy: Option<TrainingStrategy>,
    pub iou_threshold: T,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub curve: Vec<F1CurvePoint<T>>,
    pub best: OperatingPoint<T>,
    /// Classes with ground truth, at the best threshold.
    pub per_class_at_best: BTreeMap<LayoutClass, ClassPoint<T>>,
}

impl<T: Scalar> EvalReport<T> {
    pub fn from_curve(
        model_id: impl Into<String>,
        strategy: Option<TrainingStrategy>,
        options: EvalOptions<T>,
        curve: Vec<F1CurvePoint<T>>,
    ) -> Result<Self, EvalError> {
        let best = best_operating_point(&curve)?;
        let per_class_at_best = curve
            .iter()
            .rev()
            .find(|p| p.threshold == best.threshold && p.mean_f1 == best.mean_f1)
            .map(|p| p.per_class.iter().filter(|(_, v)| v.gt > 0).map(|(k, v)| (*k, *v)).collect())
            .unwrap_or_default();
        Ok(Self {
            model_id: model_id.into(),
            strategy,
            iou_threshold: options.iou_threshold,
            aggregation: options.aggregation,
            curve,
            best,
            per_class_at_best,
        })
    }

    /// `model(1)` / `model(2)` for the two training strategies.
    pub fn label(&self) -> String {
        match self.strategy {
            Some(s) => format!("{}({})", self.model_id, s.number()),
            None => self.model_id.clone(),
        }
    }

    /// Curve as CSV: threshold, one F1 column per class with ground truth, mean.
    pub fn curve_csv(&self) -> String {
        let classes: Vec<LayoutClass> = LayoutClass::ALL
            .into_iter()
            .filter(|c| self.curve.iter().any(|p| p.class_f1(*c).is_some()))
            .collect();
        let mut out = String::from("threshold");
        for c in &classes {
            let _ = write!(out, ",{c}");
        }
        out.push_str(",mean\n");
        for p in &self.curve {
            let _ = write!(out, "{}", p.threshold.to_f64_lossy());
            for c in &classes {
                let _ = write!(out, ",{}", p.class_f1(*c).map(|v| v.to_f64_lossy()).unwrap_or(0.0));
            }
            let _ = writeln!(out, ",{}", p.mean_f1.to_f64_lossy());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub best_f1: f64,
    pub threshold: f64,
}

/// Side-by-side summary of several evaluated models, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub text: String,
}

pub fn render_report<T: Scalar>(reports: &[EvalReport<T>]) -> ComparisonReport {
    let mut text = String::new();
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let row = ComparisonRow {
            label: r.label(),
            best_f1: r.best.mean_f1.to_f64_lossy(),
            threshold: r.best.threshold.to_f64_lossy(),
        };
        let _ = writeln!(text, "{}: F1={:.2}@{:.3}", row.label, row.best_f1, row.threshold);
        for (class, p) in &r.per_class_at_best {
            let _ = writeln!(
                text,
                "  {class}: F1={:.3} tp={} fp={} fn={}",
                p.f1.to_f64_lossy(),
                p.counts.tp,
                p.counts.fp,
                p.counts.fn_
            );
        }
        rows.push(row);
    }
    ComparisonReport { rows, text }
}
