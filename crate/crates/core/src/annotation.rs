//! Layout taxonomy, normalized label files and dataset splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetManifest, PageImage};
use crate::geometry::{BBox, GeometryError};
use crate::scalar::Scalar;

/// The five page-region categories. Integer ids are stable everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayoutClass {
    Text = 0,
    Title = 1,
    Picture = 2,
    Table = 3,
    Handwriting = 4,
}

impl LayoutClass {
    pub const COUNT: usize = 5;
    pub const ALL: [LayoutClass; 5] = [
        LayoutClass::Text,
        LayoutClass::Title,
        LayoutClass::Picture,
        LayoutClass::Table,
        LayoutClass::Handwriting,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LayoutClass::Text => "Text",
            LayoutClass::Title => "Title",
            LayoutClass::Picture => "Picture",
            LayoutClass::Table => "Table",
            LayoutClass::Handwriting => "Handwriting",
        }
    }

    /// Regions routed to text recognition.
    pub fn is_textual(self) -> bool {
        matches!(self, LayoutClass::Text | LayoutClass::Title)
    }
}

impl fmt::Display for LayoutClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayoutClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown layout class '{s}'"))
    }
}

/// Identity of a page within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PageRef {
    pub doc_id: String,
    pub page_number: u32,
}

impl PageRef {
    pub fn new(doc_id: impl Into<String>, page_number: u32) -> Self {
        Self { doc_id: doc_id.into(), page_number }
    }
}

impl fmt::Display for PageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.page_number)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region<T> {
    pub class: LayoutClass,
    pub bbox: BBox<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageAnnotation<T> {
    pub page: PageRef,
    pub regions: Vec<Region<T>>,
}

impl<T: Scalar> PageAnnotation<T> {
    pub fn empty(page: PageRef) -> Self {
        Self { page, regions: Vec::new() }
    }

    pub fn count(&self, class: LayoutClass) -> usize {
        self.regions.iter().filter(|r| r.class == class).count()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("line {line}: expected 5 fields `class_id cx cy w h`, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: '{token}' is not a number")]
    NotNumeric { line: usize, token: String },
    #[error("line {line}: unknown class id {id}")]
    UnknownClass { line: usize, id: String },
    #[error("line {line}: {source}")]
    Coordinate { line: usize, source: GeometryError },
}

/// Parses a label file: one `class_id cx cy w h` line per region.
pub fn parse_labels<T: Scalar + FromStr>(text: &str, page: &PageRef) -> Result<PageAnnotation<T>, LabelError> {
    let mut regions = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(LabelError::FieldCount { line, found: fields.len() });
        }
        let class = fields[0]
            .parse::<u8>()
            .ok()
            .and_then(LayoutClass::from_id)
            .ok_or_else(|| LabelError::UnknownClass { line, id: fields[0].to_string() })?;
        let mut nums = [T::zero(); 4];
        for (slot, token) in nums.iter_mut().zip(&fields[1..]) {
            *slot = token
                .parse::<T>()
                .map_err(|_| LabelError::NotNumeric { line, token: token.to_string() })?;
        }
        let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3])
            .map_err(|source| LabelError::Coordinate { line, source })?;
        regions.push(Region { class, bbox });
    }
    Ok(PageAnnotation { page: page.clone(), regions })
}

/// Serializes an annotation with six decimal places per coordinate.
pub fn write_labels<T: Scalar>(ann: &PageAnnotation<T>) -> String {
    let mut out = String::new();
    for r in &ann.regions {
        let b = r.bbox;
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            r.class.id(),
            b.cx.to_f64_lossy(),
            b.cy.to_f64_lossy(),
            b.w.to_f64_lossy(),
            b.h.to_f64_lossy()
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), SplitError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(SplitError::BadRatios(*self));
        }
        Ok(())
    }

    /// `floor(n * train)`, `floor(n * val)`, remainder.
    ///
    /// A 1e-9 slack absorbs products like `0.29 * 100 = 28.999999999999996`.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub doc_id: String,
    pub page_number: u32,
    pub subset: Subset,
}

/// Page-to-subset assignment, listed in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    #[serde(default)]
    pub stratified_by_document: bool,
    pub assignments: Vec<SplitEntry>,
}

impl SplitAssignment {
    pub fn count(&self, subset: Subset) -> usize {
        self.assignments.iter().filter(|a| a.subset == subset).count()
    }

    pub fn subset_of(&self, page: &PageRef) -> Option<Subset> {
        self.assignments
            .iter()
            .find(|a| a.doc_id == page.doc_id && a.page_number == page.page_number)
            .map(|a| a.subset)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("cannot split an empty manifest")]
    EmptyManifest,
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios(SplitRatios),
}

/// Seeded shuffle then floor/floor/remainder partition of the whole manifest.
pub fn split_dataset(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment, SplitError> {
    split_with(manifest, ratios, seed, false)
}

/// Same partition rule applied inside each document, so no source book
/// contributes pages to more than its own share of each subset.
pub fn split_dataset_by_document(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    split_with(manifest, ratios, seed, true)
}

fn split_with(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
    by_document: bool,
) -> Result<SplitAssignment, SplitError> {
    ratios.validate()?;
    if manifest.pages.is_empty() {
        return Err(SplitError::EmptyManifest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets = vec![Subset::Train; manifest.pages.len()];

    let groups: Vec<Vec<usize>> = if by_document {
        let mut by_doc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in manifest.pages.iter().enumerate() {
            by_doc.entry(p.doc_id.as_str()).or_default().push(i);
        }
        by_doc.into_values().collect()
    } else {
        vec![(0..manifest.pages.len()).collect()]
    };

    for mut group in groups {
        group.shuffle(&mut rng);
        let (train, val, _) = ratios.counts(group.len());
        for (rank, &page_idx) in group.iter().enumerate() {
            subsets[page_idx] = if rank < train {
                Subset::Train
            } else if rank < train + val {
                Subset::Val
            } else {
                Subset::Test
            };
        }
    }

    let assignments = manifest
        .pages
        .iter()
        .zip(subsets)
        .map(|(p, subset): (&PageImage, Subset)| SplitEntry {
            doc_id: p.doc_id.clone(),
            page_number: p.page_number,
            subset,
        })
        .collect();
    Ok(SplitAssignment { seed, ratios, stratified_by_document: by_document, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn page() -> PageRef {
        PageRef::new("doc", 1)
    }

    fn manifest(docs: usize, pages: u32) -> DatasetManifest {
        let mut m = DatasetManifest::default();
        for d in 0..docs {
            for p in 1..=pages {
                m.pages.push(PageImage {
                    doc_id: format!("d{d}"),
                    page_number: p,
                    width_px: 10,
                    height_px: 10,
                    path: format!("d{d}/d{d}_p{p:04}.png").into(),
                });
            }
        }
        m
    }

    #[test]
    fn class_ids_are_a_bijection() {
        let ids: HashSet<u8> = LayoutClass::ALL.iter().map(|c| c.id()).collect();
        assert_eq!(ids.len(), 5);
        for c in LayoutClass::ALL {
            assert_eq!(LayoutClass::from_id(c.id()), Some(c));
            assert_eq!(c.name().parse::<LayoutClass>().unwrap(), c);
        }
        assert_eq!(LayoutClass::from_id(5), None);
    }

    #[test]
    fn parses_single_picture_line() {
        let ann = parse_labels::<f64>("2 0.5 0.5 0.2 0.25", &page()).unwrap();
        assert_eq!(ann.regions.len(), 1);
        let r = ann.regions[0];
        assert_eq!(r.class, LayoutClass::Picture);
        assert_eq!((r.bbox.cx, r.bbox.cy, r.bbox.w, r.bbox.h), (0.5, 0.5, 0.2, 0.25));
    }

    #[test]
    fn empty_file_has_no_regions() {
        let ann = parse_labels::<f64>("", &page()).unwrap();
        assert!(ann.regions.is_empty());
        assert_eq!(write_labels(&ann), "");
    }

    #[test]
    fn label_errors_carry_line_numbers() {
        assert_eq!(
            parse_labels::<f64>("7 0.5 0.5 0.1 0.1", &page()).unwrap_err(),
            LabelError::UnknownClass { line: 1, id: "7".into() }
        );
        assert!(matches!(
            parse_labels::<f64>("0 0.5 0.5 0.1 0.1\n\n0 1.5 0.5 0.1 0.1", &page()).unwrap_err(),
            LabelError::Coordinate { line: 3, .. }
        ));
        assert_eq!(
            parse_labels::<f64>("0 0.5 0.5 0.1", &page()).unwrap_err(),
            LabelError::FieldCount { line: 1, found: 4 }
        );
        assert!(matches!(
            parse_labels::<f64>("0 0.5 abc 0.1 0.1", &page()).unwrap_err(),
            LabelError::NotNumeric { line: 1, .. }
        ));
    }

    #[test]
    fn text_region_line_starts_with_zero() {
        let ann = PageAnnotation {
            page: page(),
            regions: vec![Region { class: LayoutClass::Text, bbox: BBox::new(0.5, 0.4, 0.3, 0.2).unwrap() }],
        };
        let out = write_labels(&ann);
        assert!(out.starts_with("0 "));
        assert_eq!(out, "0 0.500000 0.400000 0.300000 0.200000\n");
    }

    fn region_strategy() -> impl Strategy<Value = Region<f64>> {
        (0u8..5, 0.0..=1.0f64, 0.0..=1.0f64, 0.001..=1.0f64, 0.001..=1.0f64).prop_map(|(c, cx, cy, w, h)| Region {
            class: LayoutClass::from_id(c).unwrap(),
            bbox: BBox::new(cx, cy, w, h).unwrap(),
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn write_then_parse_is_identity_to_six_places(regions in prop::collection::vec(region_strategy(), 0..12)) {
            let ann = PageAnnotation { page: page(), regions };
            let back = parse_labels::<f64>(&write_labels(&ann), &ann.page).unwrap();
            prop_assert_eq!(back.regions.len(), ann.regions.len());
            for (a, b) in ann.regions.iter().zip(&back.regions) {
                prop_assert_eq!(a.class, b.class);
                for (x, y) in [(a.bbox.cx, b.bbox.cx), (a.bbox.cy, b.bbox.cy), (a.bbox.w, b.bbox.w), (a.bbox.h, b.bbox.h)] {
                    prop_assert!((x - y).abs() <= 5e-7 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_counts_floor_floor_remainder() {
        let r = SplitRatios::default();
        assert_eq!(r.counts(500), (400, 50, 50));
        assert_eq!(r.counts(10), (8, 1, 1));
        assert_eq!(r.counts(7), (5, 0, 2));
        let odd = SplitRatios { train: 0.29, val: 0.31, test: 0.4 };
        assert_eq!(odd.counts(100), (29, 31, 40));
    }

    #[test]
    fn split_is_a_partition_with_exact_counts() {
        let m = manifest(5, 100);
        let s = split_dataset(&m, SplitRatios::default(), 7).unwrap();
        assert_eq!((s.count(Subset::Train), s.count(Subset::Val), s.count(Subset::Test)), (400, 50, 50));
        assert_eq!(s.assignments.len(), 500);
        let keys: HashSet<_> = s.assignments.iter().map(|a| (a.doc_id.clone(), a.page_number)).collect();
        assert_eq!(keys.len(), 500);
        let m10 = manifest(1, 10);
        let s10 = split_dataset(&m10, SplitRatios::default(), 1).unwrap();
        assert_eq!((s10.count(Subset::Train), s10.count(Subset::Val), s10.count(Subset::Test)), (8, 1, 1));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let m = manifest(2, 50);
        let base = split_dataset(&m, SplitRatios::default(), 99).unwrap();
        assert_eq!(base, split_dataset(&m, SplitRatios::default(), 99).unwrap());
        let differing = (0..20u64)
            .filter(|s| *s != 99)
            .filter(|s| split_dataset(&m, SplitRatios::default(), *s).unwrap().assignments != base.assignments)
            .count();
        assert_eq!(differing, 20);
    }

    #[test]
    fn split_by_document_respects_ratios_per_document() {
        let m = manifest(5, 100);
        let s = split_dataset_by_document(&m, SplitRatios::default(), 3).unwrap();
        for d in 0..5 {
            let doc = format!("d{d}");
            let test = s.assignments.iter().filter(|a| a.doc_id == doc && a.subset == Subset::Test).count();
            assert_eq!(test, 10);
        }
        assert!(s.stratified_by_document);
    }

    #[test]
    fn split_errors() {
        assert_eq!(
            split_dataset(&DatasetManifest::default(), SplitRatios::default(), 0).unwrap_err(),
            SplitError::EmptyManifest
        );
        let bad = SplitRatios { train: 0.8, val: 0.1, test: 0.2 };
        assert!(matches!(split_dataset(&manifest(1, 10), bad, 0), Err(SplitError::BadRatios(_))));
        let neg = SplitRatios { train: 1.1, val: -0.05, test: -0.05 };
        assert!(split_dataset(&manifest(1, 10), neg, 0).is_err());
    }
}
