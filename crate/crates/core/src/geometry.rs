//! Normalized boxes, pixel rectangles and intersection-over-union.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("{field} = {value} is outside [0, 1]")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("{field} = {value} must be positive")]
    NonPositive { field: &'static str, value: f64 },
}

/// Axis-aligned box in normalized center format.
///
/// All four values are fractions of the image width/height. The center lies
/// inside the image but the extent may reach past its border; rasterization
/// clamps, storage does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let unit = |field, v: T| {
            if v >= T::zero() && v <= T::one() {
                Ok(())
            } else {
                Err(GeometryError::OutOfRange { field, value: v.to_f64_lossy() })
            }
        };
        unit("cx", self.cx)?;
        unit("cy", self.cy)?;
        unit("w", self.w)?;
        unit("h", self.h)?;
        if !(self.w > T::zero()) {
            return Err(GeometryError::NonPositive { field: "w", value: self.w.to_f64_lossy() });
        }
        if !(self.h > T::zero()) {
            return Err(GeometryError::NonPositive { field: "h", value: self.h.to_f64_lossy() });
        }
        Ok(())
    }

    /// Builds a box from normalized corner coordinates.
    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Result<Self, GeometryError> {
        let two = T::lit(2.0);
        Self::new((x0 + x1) / two, (y0 + y1) / two, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)` in normalized units.
    pub fn corners(&self) -> (T, T, T, T) {
        let two = T::lit(2.0);
        (
            self.cx - self.w / two,
            self.cy - self.h / two,
            self.cx + self.w / two,
            self.cy + self.h / two,
        )
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Converts to a half-open pixel rectangle on a `width` x `height` raster.
    ///
    /// Each edge is rounded half away from zero, grown by `pad_px` and
    /// clamped to the raster. Returns `None` when the clamped rectangle has
    /// zero area.
    pub fn to_pixel_rect(&self, width: u32, height: u32, pad_px: u32) -> Option<PixelRect> {
        let (x0, y0, x1, y1) = self.corners();
        let px = |v: T, extent: u32| -> i64 {
            (v * T::from_count(extent as usize)).round().to_i64().unwrap_or(0)
        };
        let pad = pad_px as i64;
        let clamp = |v: i64, extent: u32| v.clamp(0, extent as i64) as u32;
        let rect = PixelRect {
            x0: clamp(px(x0, width) - pad, width),
            y0: clamp(px(y0, height) - pad, height),
            x1: clamp(px(x1, width) + pad, width),
            y1: clamp(px(y1, height) + pad, height),
        };
        (rect.x0 < rect.x1 && rect.y0 < rect.y1).then_some(rect)
    }
}

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// Re-normalizes against a raster size, giving corner fractions.
    pub fn normalized<T: Scalar>(&self, width: u32, height: u32) -> (T, T, T, T) {
        let w = T::from_count(width as usize);
        let h = T::from_count(height as usize);
        (
            T::from_count(self.x0 as usize) / w,
            T::from_count(self.y0 as usize) / h,
            T::from_count(self.x1 as usize) / w,
            T::from_count(self.y1 as usize) / h,
        )
    }
}

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= T::zero() || ih <= T::zero() {
        return T::zero();
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}
