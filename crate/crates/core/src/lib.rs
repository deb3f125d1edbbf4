//! Page-layout analysis for scanned early printed books.
//!
//! Scans are rendered to page images, regions of five layout classes are
//! detected and cropped, textual crops go through OCR and picture crops are
//! subclassified and, for illustrations, matched against text prompts.
//! Detection quality is measured with F1-confidence curves.
//!
//! Geometry and evaluation are generic over the float type; the aliases
//! below fix it to `f64`.

pub mod annotation;
pub mod command;
pub mod config;
pub mod corpus;
pub mod detection;
pub mod doclaynet;
pub mod evaluation;
pub mod geometry;
pub mod ocr;
pub mod picture;
pub mod pipeline;
pub mod scalar;
pub mod synthetic;

pub use annotation::{LayoutClass, PageRef, Subset};
pub use corpus::{DatasetManifest, PageImage};
pub use detection::{Crop, PageDetections, TrainingStrategy};
pub use geometry::PixelRect;
pub use picture::PictureSubclass;
pub use scalar::Scalar;

pub type BoundingBox = geometry::BBox<f64>;
pub type Detection = detection::Detection<f64>;
pub type Region = annotation::Region<f64>;
pub type PageAnnotation = annotation::PageAnnotation<f64>;
pub type F1CurvePoint = evaluation::F1CurvePoint<f64>;
pub type OperatingPoint = evaluation::OperatingPoint<f64>;
pub type EvalReport = evaluation::EvalReport<f64>;
pub type EvalOptions = evaluation::EvalOptions<f64>;
