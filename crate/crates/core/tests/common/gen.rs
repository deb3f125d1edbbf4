//! Seeded random instances for oracle comparisons.

use incunabula::annotation::{PageAnnotation, PageRef, Region};
use incunabula::detection::Detection;
use incunabula::geometry::BBox;
use incunabula::LayoutClass;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn class(rng: &mut ChaCha8Rng) -> LayoutClass {
    LayoutClass::ALL[rng.random_range(0..LayoutClass::COUNT)]
}

/// A valid box; a quarter of them extend past a page edge.
pub fn bbox(rng: &mut ChaCha8Rng) -> BBox<f64> {
    let w = rng.random_range(0.02..0.45);
    let h = rng.random_range(0.02..0.45);
    let (cx, cy) = if rng.random_bool(0.25) {
        (rng.random_range(0.0..0.1) + if rng.random_bool(0.5) { 0.9 } else { 0.0 }, rng.random_range(0.0..1.0))
    } else {
        (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95))
    };
    BBox::new(cx, cy, w, h).expect("generated box is valid")
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox<f64>) -> BBox<f64> {
    let j = |rng: &mut ChaCha8Rng, v: f64, lo: f64| (v + rng.random_range(-0.04..0.04)).clamp(lo, 1.0);
    BBox::new(j(rng, b.cx, 0.0), j(rng, b.cy, 0.0), j(rng, b.w, 0.005), j(rng, b.h, 0.005)).expect("jittered box is valid")
}

fn confidence(rng: &mut ChaCha8Rng) -> f64 {
    // Half the scores sit on a coarse grid so ties occur.
    if rng.random_bool(0.5) {
        rng.random_range(0..=20) as f64 / 20.0
    } else {
        rng.random_range(0.0..=1.0)
    }
}

/// At most 5 pages with at most 20 boxes (ground truth plus detections) each.
pub fn corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection<f64>>>, Vec<PageAnnotation<f64>>) {
    let pages = rng.random_range(1..=5);
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for p in 0..pages {
        let n_gt = rng.random_range(0..=10);
        let regions: Vec<Region<f64>> = (0..n_gt).map(|_| Region { class: class(rng), bbox: bbox(rng) }).collect();
        let n_det = rng.random_range(0..=(20 - n_gt).min(10));
        let page_dets = (0..n_det)
            .map(|_| {
                if !regions.is_empty() && rng.random_bool(0.65) {
                    let r = &regions[rng.random_range(0..regions.len())];
                    let c = if rng.random_bool(0.85) { r.class } else { class(rng) };
                    Detection { class: c, bbox: jitter(rng, &r.bbox), confidence: confidence(rng) }
                } else {
                    Detection { class: class(rng), bbox: bbox(rng), confidence: confidence(rng) }
                }
            })
            .collect();
        dets.push(page_dets);
        gts.push(PageAnnotation { page: PageRef::new("doc", p + 1), regions });
    }
    (dets, gts)
}

pub fn text(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    // NFC-stable alphabet, including long s and precomposed letters.
    const ALPHABET: [char; 12] = ['a', 'b', 'c', 'e', 'i', 'm', 'u', ' ', 'ſ', 'é', 'ꝑ', '.'];
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}
