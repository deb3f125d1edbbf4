//! Deliberately naive reference implementations: corner-based IoU,
//! filter-then-match per threshold and a full-matrix edit distance.

use incunabula::annotation::PageAnnotation;
use incunabula::detection::Detection;
use incunabula::LayoutClass;

pub const CLASSES: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.0 - a.2 / 2.0, a.1 - a.3 / 2.0, a.0 + a.2 / 2.0, a.1 + a.3 / 2.0);
    let (bx0, by0, bx1, by1) = (b.0 - b.2 / 2.0, b.1 - b.3 / 2.0, b.0 + b.2 / 2.0, b.1 + b.3 / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

fn tuple(d: &incunabula::BoundingBox) -> (f64, f64, f64, f64) {
    (d.cx, d.cy, d.w, d.h)
}

/// Greedy matching on one page after keeping detections with confidence >= t.
/// Returns per-class counts and matched (detection, ground truth) pairs,
/// detection indices referring to the kept list.
pub fn match_page(dets: &[Detection<f64>], gt: &PageAnnotation<f64>, t: f64, iou_thr: f64) -> ([Counts; CLASSES], Vec<(usize, usize)>) {
    let kept: Vec<&Detection<f64>> = dets.iter().filter(|d| d.confidence >= t).collect();
    // Selection sort by confidence, earliest first among equals.
    let mut order: Vec<usize> = Vec::new();
    let mut used = vec![false; kept.len()];
    for _ in 0..kept.len() {
        let mut pick: Option<usize> = None;
        for i in 0..kept.len() {
            if !used[i] && pick.is_none_or(|p| kept[i].confidence > kept[p].confidence) {
                pick = Some(i);
            }
        }
        let p = pick.unwrap();
        used[p] = true;
        order.push(p);
    }
    let mut counts = [Counts::default(); CLASSES];
    let mut claimed = vec![false; gt.regions.len()];
    let mut pairs = Vec::new();
    for &i in &order {
        let d = kept[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, r) in gt.regions.iter().enumerate() {
            if claimed[g] || r.class != d.class {
                continue;
            }
            let v = iou(tuple(&d.bbox), tuple(&r.bbox));
            if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                counts[d.class as usize].tp += 1;
                pairs.push((i, g));
            }
            None => counts[d.class as usize].fp += 1,
        }
    }
    for (g, r) in gt.regions.iter().enumerate() {
        if !claimed[g] {
            counts[r.class as usize].fn_ += 1;
        }
    }
    (counts, pairs)
}

pub fn f1(c: Counts) -> f64 {
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / d as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePoint {
    pub threshold: f64,
    /// `None` for a class with neither ground truth nor kept detections.
    pub per_class: [Option<(Counts, f64)>; CLASSES],
    pub mean_f1: f64,
}

/// Naive sweep: for each threshold filter, match and count from scratch.
/// Returns `None` when the corpus has no ground truth.
pub fn curve(dets: &[Vec<Detection<f64>>], gts: &[PageAnnotation<f64>], iou_thr: f64, macro_avg: bool) -> Option<Vec<OraclePoint>> {
    if gts.iter().all(|g| g.regions.is_empty()) {
        return None;
    }
    let mut ts: Vec<f64> = vec![0.0, 1.0];
    for d in dets.iter().flatten() {
        if !ts.contains(&d.confidence) {
            ts.push(d.confidence);
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out = Vec::new();
    for t in ts {
        let pages: Vec<[Counts; CLASSES]> = dets.iter().zip(gts).map(|(d, g)| match_page(d, g, t, iou_thr).0).collect();
        let mut per_class = [None; CLASSES];
        let (mut sum, mut n) = (0.0, 0);
        for (c, slot) in per_class.iter_mut().enumerate() {
            let mut total = Counts::default();
            for p in &pages {
                total.tp += p[c].tp;
                total.fp += p[c].fp;
                total.fn_ += p[c].fn_;
            }
            let gt = total.tp + total.fn_;
            if gt == 0 && total.fp == 0 {
                continue;
            }
            let value = if macro_avg {
                let vals: Vec<f64> = pages.iter().filter(|p| p[c].tp + p[c].fn_ > 0).map(|p| f1(p[c])).collect();
                if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            } else {
                f1(total)
            };
            *slot = Some((total, value));
            if gt > 0 {
                sum += value;
                n += 1;
            }
        }
        out.push(OraclePoint { threshold: t, per_class, mean_f1: if n == 0 { 0.0 } else { sum / n as f64 } });
    }
    Some(out)
}

/// Full-matrix Levenshtein distance.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        m[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + if a[i - 1] == b[j - 1] { 0 } else { 1 };
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

pub fn class_index(c: LayoutClass) -> usize {
    c as usize
}
