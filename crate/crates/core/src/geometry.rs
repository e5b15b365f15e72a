//! Box representations, sine-cosine positional codes and overlap measures.
//!
//! Boxes travel through the model as normalized `(cx, cy, w, h)`; corner form
//! is only used at annotation I/O and inside the overlap computations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Temperature of the geometric frequency ladder in [`sincos_encode`].
pub const PE_TEMPERATURE: f64 = 10_000.0;

/// Box in normalized center form. All components lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// The whole-image box `(0.5, 0.5, 1, 1)` used as the aggregation carrier's
/// reference.
pub const GLOBAL_BOX: NormalizedBox = NormalizedBox {
    cx: 0.5,
    cy: 0.5,
    w: 1.0,
    h: 1.0,
};

impl NormalizedBox {
    /// Build a box that may have zero extent (used for decoded predictions).
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = NormalizedBox { cx, cy, w, h };
        ensure!(
            b.as_array().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            Validation,
            "normalized box components must be finite and in [0,1], got {b:?}"
        );
        Ok(b)
    }

    /// Build a box suitable as a ground-truth or prompt box: positive extent.
    pub fn new_target(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(cx, cy, w, h)?;
        ensure!(b.w > 0.0 && b.h > 0.0, Validation, "degenerate box {b:?}");
        Ok(b)
    }

    /// Clamp arbitrary values into a valid box. Used only for model outputs,
    /// which are produced by a sigmoid and therefore already in range up to
    /// rounding.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let c = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        NormalizedBox {
            cx: c(cx),
            cy: c(cy),
            w: c(w),
            h: c(h),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        cxcywh_to_xyxy(self.as_array())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn hflip(&self) -> Self {
        NormalizedBox {
            cx: 1.0 - self.cx,
            ..*self
        }
    }

    pub fn to_absolute(&self, image_w: f64, image_h: f64) -> AbsoluteBox {
        let [x0, y0, x1, y1] = self.to_xyxy();
        AbsoluteBox {
            x0: x0 * image_w,
            y0: y0 * image_h,
            x1: x1 * image_w,
            y1: y1 * image_h,
        }
    }
}

/// Corner-form box in pixels, the storage form of annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl AbsoluteBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = AbsoluteBox { x0, y0, x1, y1 };
        ensure!(
            [x0, y0, x1, y1].iter().all(|v| v.is_finite()),
            Validation,
            "non-finite box {b:?}"
        );
        ensure!(x0 < x1 && y0 < y1, Validation, "degenerate box {b:?}");
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn within(&self, image_w: f64, image_h: f64) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= image_w && self.y1 <= image_h
    }

    /// COCO stores `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    pub fn from_xywh(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[0] + v[2], v[1] + v[3])
    }
}

/// Convert a pixel box into normalized center form.
pub fn normalize_box(b: &AbsoluteBox, image_w: f64, image_h: f64) -> Result<NormalizedBox> {
    ensure!(
        image_w > 0.0 && image_h > 0.0,
        Validation,
        "image dimensions must be positive, got {image_w}x{image_h}"
    );
    ensure!(
        b.x0 < b.x1 && b.y0 < b.y1,
        Validation,
        "degenerate box {b:?} cannot be normalized"
    );
    ensure!(
        b.within(image_w, image_h),
        Validation,
        "box {b:?} exceeds image bounds {image_w}x{image_h}"
    );
    let cx = (b.x0 + b.x1) / 2.0 / image_w;
    let cy = (b.y0 + b.y1) / 2.0 / image_h;
    let w = b.width() / image_w;
    let h = b.height() / image_h;
    NormalizedBox::new_target(cx, cy, w, h)
}

pub fn cxcywh_to_xyxy(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

pub fn xyxy_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    [
        (b[0] + b[2]) / 2.0,
        (b[1] + b[3]) / 2.0,
        b[2] - b[0],
        b[3] - b[1],
    ]
}

fn area_xyxy(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection-over-union of two corner-form boxes.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area_xyxy(&a) + area_xyxy(&b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU of two corner-form boxes, in `[-1, 1]`.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area_xyxy(&a) + area_xyxy(&b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if union <= 0.0 || hull <= 0.0 {
        return if hull <= 0.0 { 0.0 } else { -1.0 };
    }
    inter / union - (hull - union) / hull
}

pub fn iou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    iou_xyxy(a.to_xyxy(), b.to_xyxy())
}

pub fn giou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    giou_xyxy(a.to_xyxy(), b.to_xyxy())
}

/// Sine-cosine code of a sequence of scalars. Each scalar gets `per_value`
/// components: `per_value / 2` frequencies `2π / T^(2k/per_value)`, emitted as
/// interleaved `(sin, cos)` pairs.
pub fn sincos_values(values: &[f64], per_value: usize) -> Vec<f64> {
    debug_assert!(per_value % 2 == 0);
    let mut out = Vec::with_capacity(values.len() * per_value);
    for &v in values {
        let x = v * std::f64::consts::TAU;
        for k in 0..per_value / 2 {
            let divisor = PE_TEMPERATURE.powf(2.0 * k as f64 / per_value as f64);
            let a = x / divisor;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Positional code of a box: `dim / 4` components per coordinate, in
/// `(cx, cy, w, h)` order.
pub fn sincos_encode(b: &NormalizedBox, dim: usize) -> Result<Vec<f64>> {
    ensure!(
        dim > 0 && dim % 8 == 0,
        Validation,
        "positional code dimension must be a positive multiple of 8, got {dim}"
    );
    Ok(sincos_values(&b.as_array(), dim / 4))
}

/// Unchecked variant for raw `[cx, cy, w, h]` rows inside the model.
pub(crate) fn sincos_encode_raw(b: [f64; 4], dim: usize) -> Vec<f64> {
    sincos_values(&b, dim / 4)
}
