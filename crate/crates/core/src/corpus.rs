//! Source scans to a canonical per-page PNG corpus.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::RgbImage;
use lopdf::{Document, Object, ObjectId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::PageRef;

pub const DEFAULT_DPI: u32 = 300;
pub const DEFAULT_MAX_PAGES: u32 = 100;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("document '{doc_id}': {message}")]
    Document { doc_id: String, message: String },
    #[error("duplicate doc_id '{0}'")]
    DuplicateDocId(String),
    #[error("invalid doc_id '{0}': use letters, digits, '-', '_' or '.'")]
    InvalidDocId(String),
    #[error("{0} must be at least 1")]
    ZeroParameter(&'static str),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl IngestError {
    fn doc(doc_id: &str, message: impl Into<String>) -> Self {
        IngestError::Document { doc_id: doc_id.to_string(), message: message.into() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

/// True for nonempty slugs that are safe as a directory and file prefix.
pub fn is_valid_doc_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub source_path: PathBuf,
    pub page_count: u32,
}

impl SourceDocument {
    /// Opens `path` with `renderer` to learn its page count.
    pub fn open(doc_id: &str, path: impl AsRef<Path>, renderer: &dyn PageRenderer) -> Result<Self, IngestError> {
        if !is_valid_doc_id(doc_id) {
            return Err(IngestError::InvalidDocId(doc_id.to_string()));
        }
        let path = path.as_ref();
        let source = renderer.open(doc_id, path)?;
        Ok(Self { doc_id: doc_id.to_string(), source_path: path.to_path_buf(), page_count: source.page_count() })
    }
}

/// A rendered page. `path` is where the raster lives on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageImage {
    pub doc_id: String,
    pub page_number: u32,
    pub width_px: u32,
    pub height_px: u32,
    pub path: PathBuf,
}

impl PageImage {
    pub fn page_ref(&self) -> PageRef {
        PageRef::new(self.doc_id.clone(), self.page_number)
    }

    /// Canonical file name `<doc_id>_p0001.png`.
    pub fn file_name(doc_id: &str, page_number: u32) -> String {
        format!("{doc_id}_p{page_number:04}.png")
    }

    /// File stem shared by the page image and its label file.
    pub fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}_p{:04}", self.doc_id, self.page_number))
    }

    pub fn load(&self) -> Result<RgbImage, image::ImageError> {
        Ok(image::open(&self.path)?.to_rgb8())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    doc_id: String,
    page_number: u32,
    width_px: u32,
    height_px: u32,
    relative_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    pages: Vec<ManifestEntry>,
}

/// Inventory of every page in a corpus, in document then page order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub pages: Vec<PageImage>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn find(&self, page: &PageRef) -> Option<&PageImage> {
        self.pages.iter().find(|p| p.doc_id == page.doc_id && p.page_number == page.page_number)
    }

    /// Writes the manifest with paths relative to `root`.
    pub fn save(&self, root: &Path, path: &Path) -> Result<(), IngestError> {
        let pages = self
            .pages
            .iter()
            .map(|p| ManifestEntry {
                doc_id: p.doc_id.clone(),
                page_number: p.page_number,
                width_px: p.width_px,
                height_px: p.height_px,
                relative_path: p
                    .path
                    .strip_prefix(root)
                    .unwrap_or(&p.path)
                    .to_string_lossy()
                    .replace('\\', "/"),
            })
            .collect();
        let body = serde_json::to_string_pretty(&ManifestFile { pages })
            .map_err(|e| IngestError::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
        fs::write(path, body).map_err(io_err(path))
    }

    /// Reads a manifest, resolving relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        let file: ManifestFile = serde_json::from_str(&body)
            .map_err(|e| IngestError::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
        let root = path.parent().unwrap_or(Path::new("."));
        Ok(Self {
            pages: file
                .pages
                .into_iter()
                .map(|e| PageImage {
                    doc_id: e.doc_id,
                    page_number: e.page_number,
                    width_px: e.width_px,
                    height_px: e.height_px,
                    path: root.join(e.relative_path),
                })
                .collect(),
        })
    }
}

/// An opened multi-page source.
pub trait PageSource {
    fn page_count(&self) -> u32;
    /// Rasterizes a 1-based page at `dpi`.
    fn render_page(&self, page_number: u32, dpi: u32) -> Result<RgbImage, IngestError>;
}

pub trait PageRenderer: Send + Sync {
    fn open<'a>(&'a self, doc_id: &str, path: &Path) -> Result<Box<dyn PageSource + 'a>, IngestError>;
}

/// Renders image-only scan PDFs by decoding the largest image placed on each
/// page and resampling it to the page's MediaBox at the requested dpi.
///
/// Vector content (fonts, paths) is not rasterized; pages without any image
/// come out as white rasters of the right size.
#[derive(Debug, Default, Clone, Copy)]
pub struct ScanPdfRenderer;

impl PageRenderer for ScanPdfRenderer {
    fn open<'a>(&'a self, doc_id: &str, path: &Path) -> Result<Box<dyn PageSource + 'a>, IngestError> {
        let doc = Document::load(path).map_err(|e| IngestError::doc(doc_id, format!("{}: {e}", path.display())))?;
        let pages: Vec<ObjectId> = doc.get_pages().into_values().collect();
        Ok(Box::new(ScanPdf { doc_id: doc_id.to_string(), doc, pages }))
    }
}

struct ScanPdf {
    doc_id: String,
    doc: Document,
    pages: Vec<ObjectId>,
}

impl ScanPdf {
    fn err(&self, page: u32, message: impl std::fmt::Display) -> IngestError {
        IngestError::doc(&self.doc_id, format!("page {page}: {message}"))
    }

    /// MediaBox width/height in points, following inherited attributes.
    fn media_box(&self, page_id: ObjectId) -> Option<(f64, f64)> {
        let mut node = self.doc.get_dictionary(page_id).ok()?;
        for _ in 0..32 {
            if let Ok(obj) = node.get(b"MediaBox") {
                let obj = match obj {
                    Object::Reference(id) => self.doc.get_object(*id).ok()?,
                    o => o,
                };
                let nums: Vec<f64> = obj.as_array().ok()?.iter().filter_map(|o| o.as_float().ok().map(f64::from)).collect();
                if nums.len() == 4 {
                    return Some(((nums[2] - nums[0]).abs(), (nums[3] - nums[1]).abs()));
                }
                return None;
            }
            let parent = node.get(b"Parent").ok()?.as_reference().ok()?;
            node = self.doc.get_dictionary(parent).ok()?;
        }
        None
    }

    fn decode_image(&self, page: u32, id: ObjectId) -> Result<RgbImage, IngestError> {
        let stream = self
            .doc
            .get_object(id)
            .and_then(Object::as_stream)
            .map_err(|e| self.err(page, e))?;
        let dict = &stream.dict;
        let filters: Vec<String> = match dict.get(b"Filter") {
            Ok(Object::Name(n)) => vec![String::from_utf8_lossy(n).into_owned()],
            Ok(Object::Array(a)) => a
                .iter()
                .filter_map(|o| o.as_name().ok().map(|n| String::from_utf8_lossy(n).into_owned()))
                .collect(),
            _ => Vec::new(),
        };
        if filters.last().map(String::as_str) == Some("DCTDecode") {
            let bytes = if filters.len() > 1 {
                // Outer filters (e.g. Flate around JPEG) are undone by lopdf except the last one.
                stream.decompressed_content().unwrap_or_else(|_| stream.content.clone())
            } else {
                stream.content.clone()
            };
            return image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
                .map(|i| i.to_rgb8())
                .map_err(|e| self.err(page, e));
        }
        if let Some(f) = filters.iter().find(|f| *f != "FlateDecode") {
            return Err(self.err(page, format!("unsupported image filter {f}")));
        }
        let data = if filters.is_empty() {
            stream.content.clone()
        } else {
            stream.decompressed_content().map_err(|e| self.err(page, e))?
        };
        let width = dict.get(b"Width").and_then(Object::as_i64).map_err(|e| self.err(page, e))? as u32;
        let height = dict.get(b"Height").and_then(Object::as_i64).map_err(|e| self.err(page, e))? as u32;
        let bpc = dict.get(b"BitsPerComponent").and_then(Object::as_i64).unwrap_or(8);
        let space = match dict.get(b"ColorSpace") {
            Ok(Object::Name(n)) => String::from_utf8_lossy(n).into_owned(),
            Ok(Object::Array(a)) => a.first().and_then(|o| o.as_name().ok()).map(|n| String::from_utf8_lossy(n).into_owned()).unwrap_or_default(),
            _ => "DeviceGray".to_string(),
        };
        let channels = match space.as_str() {
            "DeviceRGB" | "CalRGB" => 3,
            "DeviceGray" | "CalGray" => 1,
            "DeviceCMYK" => 4,
            other => return Err(self.err(page, format!("unsupported color space {other}"))),
        };
        raw_to_rgb(&data, width, height, channels, bpc as u32).ok_or_else(|| self.err(page, "image data shorter than declared size"))
    }
}

fn raw_to_rgb(data: &[u8], width: u32, height: u32, channels: usize, bpc: u32) -> Option<RgbImage> {
    let (w, h) = (width as usize, height as usize);
    match (channels, bpc) {
        (_, 8) => {
            if data.len() < w * h * channels {
                return None;
            }
            let mut img = RgbImage::new(width, height);
            for (i, px) in img.pixels_mut().enumerate() {
                let s = &data[i * channels..(i + 1) * channels];
                px.0 = match channels {
                    1 => [s[0]; 3],
                    3 => [s[0], s[1], s[2]],
                    _ => {
                        let k = 255 - s[3] as u16;
                        let ch = |c: u8| ((255 - c as u16) * k / 255) as u8;
                        [ch(s[0]), ch(s[1]), ch(s[2])]
                    }
                };
            }
            Some(img)
        }
        (1, 1) => {
            let row_bytes = w.div_ceil(8);
            if data.len() < row_bytes * h {
                return None;
            }
            Some(RgbImage::from_fn(width, height, |x, y| {
                let byte = data[y as usize * row_bytes + x as usize / 8];
                let bit = (byte >> (7 - (x % 8))) & 1;
                image::Rgb([if bit == 1 { 255 } else { 0 }; 3])
            }))
        }
        _ => None,
    }
}

impl PageSource for ScanPdf {
    fn page_count(&self) -> u32 {
        self.pages.len() as u32
    }

    fn render_page(&self, page_number: u32, dpi: u32) -> Result<RgbImage, IngestError> {
        let page_id = *self
            .pages
            .get((page_number as usize).wrapping_sub(1))
            .ok_or_else(|| self.err(page_number, "no such page"))?;
        let (w_pt, h_pt) = self.media_box(page_id).unwrap_or((612.0, 792.0));
        let target_w = ((w_pt * dpi as f64 / 72.0).round() as u32).max(1);
        let target_h = ((h_pt * dpi as f64 / 72.0).round() as u32).max(1);
        let images = self.doc.get_page_images(page_id).unwrap_or_default();
        let largest = images.iter().max_by_key(|i| i.width.max(0) * i.height.max(0)).map(|i| i.id);
        let Some(id) = largest else {
            return Ok(RgbImage::from_pixel(target_w, target_h, image::Rgb([255, 255, 255])));
        };
        let img = self.decode_image(page_number, id)?;
        if img.dimensions() == (target_w, target_h) {
            return Ok(img);
        }
        Ok(image::imageops::resize(&img, target_w, target_h, image::imageops::FilterType::Triangle))
    }
}

/// Renders the first `min(page_count, max_pages)` pages of `doc` into
/// `corpus_root/<doc_id>/<doc_id>_pNNNN.png`.
pub fn extract_pages(
    doc: &SourceDocument,
    max_pages: u32,
    dpi: u32,
    corpus_root: &Path,
    renderer: &dyn PageRenderer,
) -> Result<Vec<PageImage>, IngestError> {
    if max_pages == 0 {
        return Err(IngestError::ZeroParameter("max_pages"));
    }
    if dpi == 0 {
        return Err(IngestError::ZeroParameter("dpi"));
    }
    let source = renderer.open(&doc.doc_id, &doc.source_path)?;
    let count = source.page_count().min(max_pages);
    if count == 0 {
        return Ok(Vec::new());
    }
    let dir = corpus_root.join(&doc.doc_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut pages = Vec::with_capacity(count as usize);
    for page_number in 1..=count {
        let img = source.render_page(page_number, dpi)?;
        let path = dir.join(PageImage::file_name(&doc.doc_id, page_number));
        img.save(&path)
            .map_err(|e| IngestError::doc(&doc.doc_id, format!("writing {}: {e}", path.display())))?;
        pages.push(PageImage {
            doc_id: doc.doc_id.clone(),
            page_number,
            width_px: img.width(),
            height_px: img.height(),
            path,
        });
    }
    Ok(pages)
}

/// Extracts every document (in parallel) and assembles the manifest in input order.
pub fn build_corpus(
    docs: &[SourceDocument],
    max_pages: u32,
    dpi: u32,
    corpus_root: &Path,
    renderer: &dyn PageRenderer,
) -> Result<DatasetManifest, IngestError> {
    let mut seen = HashSet::new();
    for d in docs {
        if !is_valid_doc_id(&d.doc_id) {
            return Err(IngestError::InvalidDocId(d.doc_id.clone()));
        }
        if !seen.insert(d.doc_id.as_str()) {
            return Err(IngestError::DuplicateDocId(d.doc_id.clone()));
        }
    }
    let per_doc: Vec<Result<Vec<PageImage>, IngestError>> = docs
        .par_iter()
        .map(|d| extract_pages(d, max_pages, dpi, corpus_root, renderer))
        .collect();
    let mut manifest = DatasetManifest::default();
    for pages in per_doc {
        manifest.pages.extend(pages?);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{write_scan_pdf, ScanEncoding};

    /// In-memory renderer producing flat gray pages, for page-count logic.
    struct FakeRenderer {
        counts: Vec<(String, u32)>,
    }

    struct FakeSource(u32);

    impl PageSource for FakeSource {
        fn page_count(&self) -> u32 {
            self.0
        }
        fn render_page(&self, _page: u32, dpi: u32) -> Result<RgbImage, IngestError> {
            Ok(RgbImage::from_pixel(dpi / 10, dpi / 5, image::Rgb([128, 128, 128])))
        }
    }

    impl PageRenderer for FakeRenderer {
        fn open<'a>(&'a self, doc_id: &str, _path: &Path) -> Result<Box<dyn PageSource + 'a>, IngestError> {
            let n = self
                .counts
                .iter()
                .find(|(id, _)| id == doc_id)
                .map(|(_, n)| *n)
                .ok_or_else(|| IngestError::doc(doc_id, "unreadable"))?;
            Ok(Box::new(FakeSource(n)))
        }
    }

    fn doc(id: &str, n: u32) -> SourceDocument {
        SourceDocument { doc_id: id.into(), source_path: PathBuf::from(format!("{id}.pdf")), page_count: n }
    }

    #[test]
    fn extract_caps_at_max_pages() {
        let tmp = tempfile::tempdir().unwrap();
        let r = FakeRenderer { counts: vec![("big".into(), 250), ("small".into(), 7), ("none".into(), 0)] };
        let pages = extract_pages(&doc("big", 250), 100, 100, tmp.path(), &r).unwrap();
        assert_eq!(pages.len(), 100);
        assert_eq!(pages.iter().map(|p| p.page_number).collect::<Vec<_>>(), (1..=100).collect::<Vec<_>>());
        assert!(pages[0].path.ends_with("big/big_p0001.png"));
        assert_eq!(extract_pages(&doc("small", 7), 100, 100, tmp.path(), &r).unwrap().len(), 7);
        assert!(extract_pages(&doc("none", 0), 100, 100, tmp.path(), &r).unwrap().is_empty());
        assert!(matches!(
            extract_pages(&doc("missing", 1), 100, 100, tmp.path(), &r),
            Err(IngestError::Document { doc_id, .. }) if doc_id == "missing"
        ));
    }

    #[test]
    fn corpus_of_five_books_has_five_hundred_pages() {
        let tmp = tempfile::tempdir().unwrap();
        let counts: Vec<(String, u32)> = (0..5).map(|i| (format!("inc{i}"), 100 + 30 * i)).collect();
        let docs: Vec<_> = counts.iter().map(|(id, n)| doc(id, *n)).collect();
        let r = FakeRenderer { counts };
        let m = build_corpus(&docs, 100, 30, tmp.path(), &r).unwrap();
        assert_eq!(m.len(), 500);
        let on_disk = walk_png(tmp.path());
        assert_eq!(on_disk, 500);
    }

    fn walk_png(dir: &Path) -> usize {
        let mut n = 0;
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                n += walk_png(&p);
            } else if p.extension().is_some_and(|x| x == "png") {
                n += 1;
            }
        }
        n
    }

    #[test]
    fn duplicate_doc_ids_rejected_before_extraction() {
        let tmp = tempfile::tempdir().unwrap();
        let r = FakeRenderer { counts: vec![("a".into(), 3)] };
        let err = build_corpus(&[doc("a", 3), doc("a", 3)], 100, 30, tmp.path(), &r).unwrap_err();
        assert!(matches!(err, IngestError::DuplicateDocId(id) if id == "a"));
        assert!(fs::read_dir(tmp.path()).unwrap().next().is_none());
        assert_eq!(build_corpus(&[doc("a", 3)], 100, 30, tmp.path(), &r).unwrap().len(), 3);
    }

    #[test]
    fn doc_id_validation() {
        assert!(is_valid_doc_id("inc-1493_a.v2"));
        assert!(!is_valid_doc_id(""));
        assert!(!is_valid_doc_id("a/b"));
        assert!(!is_valid_doc_id(".."));
    }

    #[test]
    fn renders_scan_pdf_at_requested_dpi() {
        let tmp = tempfile::tempdir().unwrap();
        let pdf = tmp.path().join("scan.pdf");
        let pages: Vec<RgbImage> = (0..3)
            .map(|i| RgbImage::from_fn(72, 96, |x, y| image::Rgb([(x * 3) as u8, (y * 2) as u8, 40 * i as u8])))
            .collect();
        // 72 x 96 pt pages: at 100 dpi that is 100 x 133 px.
        write_scan_pdf(&pdf, &pages, (72.0, 96.0), ScanEncoding::Raw).unwrap();
        let src = SourceDocument::open("scan", &pdf, &ScanPdfRenderer).unwrap();
        assert_eq!(src.page_count, 3);
        let out = tmp.path().join("corpus");
        let a = extract_pages(&src, 100, 100, &out, &ScanPdfRenderer).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!((a[0].width_px, a[0].height_px), (100, 133));
        let b = extract_pages(&src, 2, 100, &out, &ScanPdfRenderer).unwrap();
        assert_eq!(a[..2], b[..]);
        // At 72 dpi the page size equals the embedded raster, which is kept as-is.
        let exact = extract_pages(&src, 1, 72, &tmp.path().join("c72"), &ScanPdfRenderer).unwrap();
        assert_eq!(exact[0].load().unwrap(), pages[0]);
    }

    #[test]
    fn renders_jpeg_scans_and_reports_corrupt_files() {
        let tmp = tempfile::tempdir().unwrap();
        let pdf = tmp.path().join("jpeg.pdf");
        let page = RgbImage::from_pixel(40, 40, image::Rgb([200, 30, 30]));
        write_scan_pdf(&pdf, &[page], (40.0, 40.0), ScanEncoding::Jpeg).unwrap();
        let src = SourceDocument::open("jpeg", &pdf, &ScanPdfRenderer).unwrap();
        let out = extract_pages(&src, 5, 72, &tmp.path().join("c"), &ScanPdfRenderer).unwrap();
        let px = out[0].load().unwrap().get_pixel(20, 20).0;
        assert!(px[0] > 170 && px[1] < 70, "{px:?}");

        let bad = tmp.path().join("bad.pdf");
        fs::write(&bad, b"not a pdf at all").unwrap();
        let err = SourceDocument::open("bad", &bad, &ScanPdfRenderer).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn manifest_round_trips_with_relative_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let r = FakeRenderer { counts: vec![("a".into(), 2)] };
        let m = build_corpus(&[doc("a", 2)], 10, 30, tmp.path(), &r).unwrap();
        let file = tmp.path().join(MANIFEST_FILE);
        m.save(tmp.path(), &file).unwrap();
        let body = fs::read_to_string(&file).unwrap();
        assert!(body.contains("\"relative_path\": \"a/a_p0001.png\""));
        assert_eq!(DatasetManifest::load(&file).unwrap(), m);
    }
}
