//! Deterministic synthetic fixtures: scan PDFs, labeled pages and picture
//! textures whose ground truth is known by construction.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use lopdf::{dictionary, Document, Object, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotation::{write_labels, LayoutClass, PageAnnotation, PageRef, Region};
use crate::corpus::PageImage;
use crate::geometry::BBox;
use crate::picture::PictureSubclass;

pub const BACKGROUND: Rgb<u8> = Rgb([245, 240, 228]);

/// Fill color used for each class on synthetic pages.
pub fn class_color(class: LayoutClass) -> Rgb<u8> {
    match class {
        LayoutClass::Text => Rgb([30, 30, 30]),
        LayoutClass::Title => Rgb([185, 25, 25]),
        LayoutClass::Picture => Rgb([25, 60, 175]),
        LayoutClass::Table => Rgb([25, 140, 45]),
        LayoutClass::Handwriting => Rgb([150, 95, 20]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanEncoding {
    /// Uncompressed 8-bit RGB samples.
    Raw,
    /// Flate-compressed 8-bit RGB samples.
    Flate,
    /// Baseline JPEG (`DCTDecode`).
    Jpeg,
}

/// Writes an image-only PDF with one full-page raster per page.
pub fn write_scan_pdf(
    path: &Path,
    pages: &[RgbImage],
    page_size_pt: (f64, f64),
    encoding: ScanEncoding,
) -> Result<(), lopdf::Error> {
    let mut doc = Document::with_version("1.5");
    let pages_id = doc.new_object_id();
    let (w_pt, h_pt) = page_size_pt;
    let mut kids: Vec<Object> = Vec::new();
    for img in pages {
        let mut dict = dictionary! {
            "Type" => "XObject",
            "Subtype" => "Image",
            "Width" => img.width() as i64,
            "Height" => img.height() as i64,
            "ColorSpace" => "DeviceRGB",
            "BitsPerComponent" => 8,
        };
        let stream = match encoding {
            ScanEncoding::Raw => Stream::new(dict, img.as_raw().clone()).with_compression(false),
            ScanEncoding::Flate => {
                let mut s = Stream::new(dict, img.as_raw().clone());
                s.compress()?;
                s
            }
            ScanEncoding::Jpeg => {
                let mut bytes = Vec::new();
                img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Jpeg)
                    .map_err(|e| lopdf::Error::IO(std::io::Error::other(e)))?;
                dict.set("Filter", "DCTDecode");
                Stream::new(dict, bytes).with_compression(false)
            }
        };
        let image_id = doc.add_object(stream);
        let content = format!("q {w_pt} 0 0 {h_pt} 0 0 cm /Im0 Do Q");
        let content_id = doc.add_object(Stream::new(dictionary! {}, content.into_bytes()));
        let page_id = doc.add_object(dictionary! {
            "Type" => "Page",
            "Parent" => pages_id,
            "Contents" => content_id,
            "Resources" => dictionary! { "XObject" => dictionary! { "Im0" => image_id } },
        });
        kids.push(page_id.into());
    }
    let count = kids.len() as i64;
    doc.objects.insert(
        pages_id,
        Object::Dictionary(dictionary! {
            "Type" => "Pages",
            "Kids" => kids,
            "Count" => count,
            "MediaBox" => vec![0.into(), 0.into(), Object::Real(w_pt as f32), Object::Real(h_pt as f32)],
        }),
    );
    let catalog = doc.add_object(dictionary! { "Type" => "Catalog", "Pages" => pages_id });
    doc.trailer.set("Root", catalog);
    let mut file = fs::File::create(path)?;
    doc.save_to(&mut file)?;
    Ok(())
}

/// A page of solid rectangles on a parchment background.
///
/// Regions sit in distinct cells of a `grid` x `grid` lattice, so they never
/// touch; boxes are exact to the pixel.
pub fn labeled_page(
    width: u32,
    height: u32,
    seed: u64,
    classes: &[LayoutClass],
    max_regions: usize,
) -> (RgbImage, Vec<Region<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    let grid = 4u32;
    let (cell_w, cell_h) = (width / grid, height / grid);
    let mut cells: Vec<(u32, u32)> = (0..grid).flat_map(|r| (0..grid).map(move |c| (c, r))).collect();
    let n = if max_regions == 0 { 0 } else { rng.random_range(1..=max_regions.min(cells.len())) };
    let mut regions = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.random_range(0..cells.len());
        let (col, row) = cells.swap_remove(pick);
        let class = classes[rng.random_range(0..classes.len())];
        let margin_x = cell_w / 8;
        let margin_y = cell_h / 8;
        let rw = rng.random_range(cell_w / 4..=cell_w - 2 * margin_x);
        let rh = rng.random_range(cell_h / 4..=cell_h - 2 * margin_y);
        let x0 = col * cell_w + margin_x + rng.random_range(0..=(cell_w - 2 * margin_x - rw));
        let y0 = row * cell_h + margin_y + rng.random_range(0..=(cell_h - 2 * margin_y - rh));
        let color = class_color(class);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                img.put_pixel(x, y, color);
            }
        }
        let bbox = BBox::from_corners(
            x0 as f64 / width as f64,
            y0 as f64 / height as f64,
            (x0 + rw) as f64 / width as f64,
            (y0 + rh) as f64 / height as f64,
        )
        .expect("region inside page");
        regions.push(Region { class, bbox });
    }
    (img, regions)
}

/// Writes `count` labeled pages as `images/*.png` + `labels/*.txt` under `dir`.
pub fn write_labeled_dataset(
    dir: &Path,
    doc_id: &str,
    count: u32,
    size: (u32, u32),
    seed: u64,
) -> std::io::Result<Vec<(PageImage, PageAnnotation<f64>)>> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&labels)?;
    let mut out = Vec::new();
    for page_number in 1..=count {
        let (img, regions) = labeled_page(size.0, size.1, seed.wrapping_add(page_number as u64), &LayoutClass::ALL, 6);
        let name = PageImage::file_name(doc_id, page_number);
        let path: PathBuf = images.join(&name);
        img.save(&path).map_err(std::io::Error::other)?;
        let page = PageImage { doc_id: doc_id.into(), page_number, width_px: size.0, height_px: size.1, path };
        let ann = PageAnnotation { page: PageRef::new(doc_id, page_number), regions };
        fs::write(labels.join(format!("{}.txt", page.stem())), write_labels(&ann))?;
        out.push((page, ann));
    }
    Ok(out)
}

/// A square picture crop whose texture identifies its subclass.
pub fn subclass_texture(subclass: PictureSubclass, seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subclass as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let jitter = |rng: &mut ChaCha8Rng, v: u8| -> u8 { (v as i32 + rng.random_range(-12..=12)).clamp(0, 255) as u8 };
    let c = size as f64 / 2.0;
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let r = (dx * dx + dy * dy).sqrt();
            let base = match subclass {
                PictureSubclass::DecorativeLetter => {
                    if (r as u32 / 4) % 2 == 0 { [190, 40, 30] } else { [230, 200, 80] }
                }
                PictureSubclass::Illustration => {
                    if (x + y) % 3 == 0 { [20, 20, 20] } else { [225, 220, 205] }
                }
                PictureSubclass::Other => [150, 110, 70],
                PictureSubclass::Stamp => {
                    if r < c * 0.8 && r > c * 0.55 { [40, 60, 200] } else { [240, 240, 245] }
                }
                PictureSubclass::WrongDetection => {
                    let v = rng.random_range(60..200u8);
                    [v, v, v]
                }
            };
            img.put_pixel(x, y, Rgb([jitter(&mut rng, base[0]), jitter(&mut rng, base[1]), jitter(&mut rng, base[2])]));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_pages_are_deterministic_and_in_bounds() {
        let (a, ra) = labeled_page(200, 300, 5, &LayoutClass::ALL, 6);
        let (b, rb) = labeled_page(200, 300, 5, &LayoutClass::ALL, 6);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(!ra.is_empty());
        for r in &ra {
            r.bbox.validate().unwrap();
            let rect = r.bbox.to_pixel_rect(200, 300, 0).unwrap();
            assert_eq!(*a.get_pixel(rect.x0, rect.y0), class_color(r.class));
            assert_eq!(*a.get_pixel(rect.x1 - 1, rect.y1 - 1), class_color(r.class));
        }
    }
}
