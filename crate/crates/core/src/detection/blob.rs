use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, BackendError, DetectionDataset, Detection, DetectorBackend, Hyperparams, TrainingPhase};
use crate::annotation::LayoutClass;
use crate::corpus::PageImage;
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobDetectorParams {
    /// RGB distance from the page background above which a pixel is ink.
    pub background_tolerance: f64,
    /// Components smaller than this fraction of the page are ignored.
    pub min_area_frac: f64,
    /// Dilation radius (working-resolution pixels) that merges nearby ink.
    pub merge_px: u32,
    /// Pages are analysed at most this many pixels on the long side.
    pub max_side: u32,
    /// Softmax temperature over color distances.
    pub temperature: f64,
}

impl Default for BlobDetectorParams {
    fn default() -> Self {
        Self { background_tolerance: 60.0, min_area_frac: 0.0005, merge_px: 0, max_side: 1024, temperature: 20.0 }
    }
}

impl BlobDetectorParams {
    fn apply(&mut self, hp: &Hyperparams) -> Result<(), BackendError> {
        let num = |k: &str, v: &str| v.parse::<f64>().map_err(|_| BackendError::Output(format!("hyperparameter {k}={v} is not a number")));
        for (k, v) in hp {
            match k.as_str() {
                "background_tolerance" => self.background_tolerance = num(k, v)?,
                "min_area_frac" => self.min_area_frac = num(k, v)?,
                "merge_px" => self.merge_px = num(k, v)? as u32,
                "max_side" => self.max_side = num(k, v)? as u32,
                "temperature" => self.temperature = num(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Trainable connected-component detector.
///
/// Ink is whatever differs from the page's dominant color; each connected
/// ink component becomes a box whose class is the nearest learned class
/// color. Confidence is the softmax probability of that class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlobDetector {
    pub params: BlobDetectorParams,
    centroids: BTreeMap<LayoutClass, [f64; 3]>,
}

struct Component {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    ink: usize,
    color_sum: [f64; 3],
}

impl BlobDetector {
    pub fn new(params: BlobDetectorParams) -> Self {
        Self { params, centroids: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let body = fs::read_to_string(path).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&body).map_err(|e| BackendError::Output(e.to_string()))
    }

    pub fn centroid(&self, class: LayoutClass) -> Option<[f64; 3]> {
        self.centroids.get(&class).copied()
    }

    fn working_image(&self, image: &RgbImage) -> RgbImage {
        let (w, h) = image.dimensions();
        let long = w.max(h);
        if long <= self.params.max_side || self.params.max_side == 0 {
            return image.clone();
        }
        let scale = self.params.max_side as f64 / long as f64;
        let nw = ((w as f64 * scale).round() as u32).max(1);
        let nh = ((h as f64 * scale).round() as u32).max(1);
        image::imageops::resize(image, nw, nh, image::imageops::FilterType::Nearest)
    }

    fn ink_mask(&self, image: &RgbImage) -> Vec<bool> {
        let bg = dominant_color(image);
        let tol2 = self.params.background_tolerance.powi(2);
        image.pixels().map(|p| dist2(rgb(p.0), bg) > tol2).collect()
    }

    fn components(&self, image: &RgbImage) -> Vec<Component> {
        let (w, h) = image.dimensions();
        let ink = self.ink_mask(image);
        let grouping = dilate(&ink, w, h, self.params.merge_px);
        let mut label = vec![false; ink.len()];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..ink.len() {
            if !grouping[start] || label[start] {
                continue;
            }
            label[start] = true;
            queue.push_back(start);
            let mut c = Component { x0: u32::MAX, y0: u32::MAX, x1: 0, y1: 0, ink: 0, color_sum: [0.0; 3] };
            while let Some(i) = queue.pop_front() {
                let (x, y) = ((i % w as usize) as u32, (i / w as usize) as u32);
                if ink[i] {
                    c.x0 = c.x0.min(x);
                    c.y0 = c.y0.min(y);
                    c.x1 = c.x1.max(x + 1);
                    c.y1 = c.y1.max(y + 1);
                    c.ink += 1;
                    let px = rgb(image.get_pixel(x, y).0);
                    for k in 0..3 {
                        c.color_sum[k] += px[k];
                    }
                }
                for (dx, dy) in [(-1i64, -1i64), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w as usize + nx as usize;
                    if grouping[j] && !label[j] {
                        label[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            if c.ink > 0 {
                out.push(c);
            }
        }
        out
    }

    fn classify(&self, color: [f64; 3]) -> Option<(LayoutClass, f64)> {
        let t = self.params.temperature.max(1e-9);
        let scored: Vec<(LayoutClass, f64)> = self.centroids.iter().map(|(c, m)| (*c, -dist2(color, *m).sqrt() / t)).collect();
        let max = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scored.iter().map(|s| (s.1 - max).exp()).sum();
        scored
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(c, s)| (c, ((s - max).exp() / z).clamp(0.0, 1.0)))
    }
}

fn rgb(p: [u8; 3]) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Mean color of the most populated 16-level RGB bucket.
fn dominant_color(image: &RgbImage) -> [f64; 3] {
    let mut buckets: BTreeMap<(u8, u8, u8), (usize, [f64; 3])> = BTreeMap::new();
    for p in image.pixels() {
        let e = buckets.entry((p.0[0] >> 4, p.0[1] >> 4, p.0[2] >> 4)).or_insert((0, [0.0; 3]));
        e.0 += 1;
        for k in 0..3 {
            e.1[k] += p.0[k] as f64;
        }
    }
    buckets
        .values()
        .max_by_key(|(n, _)| *n)
        .map(|(n, s)| [s[0] / *n as f64, s[1] / *n as f64, s[2] / *n as f64])
        .unwrap_or([255.0; 3])
}

/// Square dilation with radius `r`, done separably.
fn dilate(mask: &[bool], w: u32, h: u32, r: u32) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let (w, h, r) = (w as usize, h as usize, r as usize);
    let mut rows = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|k| mask[y * w + k]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = (lo..=hi).any(|k| rows[k * w + x]);
        }
    }
    out
}

impl DetectorBackend for BlobDetector {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { trainable: true, model_name: "blob".into() }
    }

    /// Learns one mean ink color per class present in `data`; classes absent
    /// from this phase keep the color learned in earlier phases.
    fn train(&mut self, _phase: &TrainingPhase, data: &DetectionDataset, hyperparams: &Hyperparams) -> Result<(), BackendError> {
        self.params.apply(hyperparams)?;
        let mut sums: BTreeMap<LayoutClass, ([f64; 3], usize)> = BTreeMap::new();
        let tol2 = self.params.background_tolerance.powi(2);
        for sample in &data.samples {
            let image = self.working_image(&sample.page.load()?);
            let bg = dominant_color(&image);
            let (w, h) = image.dimensions();
            for region in &sample.annotation.regions {
                let Some(rect) = region.bbox.to_pixel_rect(w, h, 0) else { continue };
                let entry = sums.entry(region.class).or_insert(([0.0; 3], 0));
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        let px = rgb(image.get_pixel(x, y).0);
                        if dist2(px, bg) > tol2 {
                            for k in 0..3 {
                                entry.0[k] += px[k];
                            }
                            entry.1 += 1;
                        }
                    }
                }
            }
        }
        for (class, (sum, n)) in sums {
            if n > 0 {
                self.centroids.insert(class, [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64]);
            }
        }
        if self.centroids.is_empty() {
            return Err(BackendError::Untrained);
        }
        Ok(())
    }

    fn predict(&self, _page: &PageImage, image: &RgbImage) -> Result<Vec<Detection<f64>>, BackendError> {
        if self.centroids.is_empty() {
            return Err(BackendError::Untrained);
        }
        let work = self.working_image(image);
        let (w, h) = work.dimensions();
        let min_area = self.params.min_area_frac * (w as f64) * (h as f64);
        let mut dets = Vec::new();
        for c in self.components(&work) {
            let area = ((c.x1 - c.x0) * (c.y1 - c.y0)) as f64;
            if area < min_area {
                continue;
            }
            let mean = [c.color_sum[0] / c.ink as f64, c.color_sum[1] / c.ink as f64, c.color_sum[2] / c.ink as f64];
            let Some((class, confidence)) = self.classify(mean) else { continue };
            let bbox = BBox::from_corners(
                c.x0 as f64 / w as f64,
                c.y0 as f64 / h as f64,
                c.x1 as f64 / w as f64,
                c.y1 as f64 / h as f64,
            )
            .map_err(|e| BackendError::Output(e.to_string()))?;
            dets.push(Detection { class, bbox, confidence });
        }
        Ok(dets)
    }

    fn save(&self, path: &Path) -> Result<(), BackendError> {
        let body = serde_json::to_string_pretty(self).map_err(|e| BackendError::Output(e.to_string()))?;
        fs::write(path, body).map_err(|source| BackendError::Io { path: path.to_path_buf(), source })
    }
}
