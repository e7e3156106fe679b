//! Box geometry and the detector pre-/post-processing contract.
//!
//! Everything here works in corner form `(x0, y0, x1, y1)` and in the pixel
//! coordinate frame of the source image, except for raw detector output,
//! which lives in model-input coordinates until [`postprocess`] maps it back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::FrameMessage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("invalid box ({x0}, {y0}, {x1}, {y1}): corners must be finite with x0 <= x1 and y0 <= y1")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("confidence {0} is outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("zero-sized image ({cols}x{rows}x{channels})")]
    ZeroSized { rows: u32, cols: u32, channels: u32 },
    #[error("target size {width}x{height} must be positive")]
    ZeroTarget { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    PixelLength { expected: usize, actual: usize },
}

/// Axis-aligned box in corner form. Zero-area boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, VisionError> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// Converts a COCO-style `[x, y, width, height]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, VisionError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if finite && self.x0 <= self.x1 && self.y0 <= self.y1 {
            Ok(())
        } else {
            Err(VisionError::InvalidBox { x0: self.x0, y0: self.y0, x1: self.x1, y1: self.y1 })
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Multiplies x coordinates by `sx` and y coordinates by `sy`.
    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox { x0: self.x0 * sx, y0: self.y0 * sy, x1: self.x1 * sx, y1: self.y1 * sy }
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox { x0: cx(self.x0), y0: cy(self.y0), x1: cx(self.x1), y1: cy(self.y1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, confidence: f64) -> Result<Self, VisionError> {
        let d = Detection { bbox, class_id, confidence };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), VisionError> {
        self.bbox.validate()?;
        if (0.0..=1.0).contains(&self.confidence) {
            Ok(())
        } else {
            Err(VisionError::InvalidConfidence(self.confidence))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class_id: u32,
    pub frame_id: u64,
}

/// Intersection over union. Zero-area boxes score 0 against everything,
/// themselves included.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = a.x1.min(b.x1) - a.x0.max(b.x0);
    let ih = a.y1.min(b.y1) - a.y0.max(b.y0);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Keeps detections with `confidence >= threshold`, in their original order.
pub fn filter_by_confidence(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter().copied().filter(|d| d.confidence >= threshold).collect()
}

/// Indices of `dets` ordered by descending confidence, ties by lower index.
pub(crate) fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Per-class greedy non-maximum suppression.
///
/// A detection is suppressed when a kept detection of the same class overlaps
/// it with IoU strictly greater than `iou_threshold`. The result is sorted by
/// descending confidence.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let order = confidence_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Ratio of model-input size to source size along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub sx: f64,
    pub sy: f64,
}

impl ScaleFactors {
    pub const UNIT: ScaleFactors = ScaleFactors { sx: 1.0, sy: 1.0 };
}

/// Normalized image in height-width-channel order, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn at(&self, x: u32, y: u32, c: u32) -> f32 {
        self.data[((y * self.width + x) * self.channels + c) as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub tensor: Tensor,
    pub scale: ScaleFactors,
}

/// Bilinear resize to `width x height` followed by scaling to `[0, 1]`.
///
/// Sampling uses pixel centers with edge clamping. Channel order is left as
/// it arrives on the wire.
pub fn preprocess(frame: &FrameMessage, width: u32, height: u32) -> Result<Preprocessed, VisionError> {
    let (rows, cols, ch) = (frame.rows, frame.cols, frame.channels);
    if rows == 0 || cols == 0 || ch == 0 {
        return Err(VisionError::ZeroSized { rows, cols, channels: ch });
    }
    if width == 0 || height == 0 {
        return Err(VisionError::ZeroTarget { width, height });
    }
    let expected = rows as usize * cols as usize * ch as usize;
    if frame.pixel_data.len() != expected {
        return Err(VisionError::PixelLength { expected, actual: frame.pixel_data.len() });
    }

    let px = &frame.pixel_data;
    let fetch = |x: usize, y: usize, c: usize| px[(y * cols as usize + x) * ch as usize + c] as f32;
    let xs = sample_axis(cols, width);
    let ys = sample_axis(rows, height);

    let mut data = Vec::with_capacity(width as usize * height as usize * ch as usize);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..ch as usize {
                let top = lerp(fetch(x0, y0, c), fetch(x1, y0, c), fx);
                let bottom = lerp(fetch(x0, y1, c), fetch(x1, y1, c), fx);
                data.push(lerp(top, bottom, fy) / 255.0);
            }
        }
    }

    Ok(Preprocessed {
        tensor: Tensor { width, height, channels: ch, data },
        scale: ScaleFactors {
            sx: width as f64 / cols as f64,
            sy: height as f64 / rows as f64,
        },
    })
}

// `a + (b - a) * t` returns `a` exactly when `a == b`, so constant regions
// stay constant after resizing.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

fn sample_axis(src: u32, dst: u32) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let lo = s.floor();
            let hi = (lo + 1.0).min(last);
            (lo as usize, hi as usize, (s - lo) as f32)
        })
        .collect()
}

/// Maps raw detections from model-input coordinates back to the source frame,
/// then applies confidence filtering and NMS, in that order.
pub fn postprocess(
    raw: &[Detection],
    scale: ScaleFactors,
    confidence_threshold: f64,
    nms_threshold: f64,
) -> Vec<Detection> {
    let unscaled: Vec<Detection> = raw
        .iter()
        .map(|d| Detection {
            bbox: unscale(&d.bbox, scale),
            ..*d
        })
        .collect();
    nms(&filter_by_confidence(&unscaled, confidence_threshold), nms_threshold)
}

fn unscale(b: &BBox, scale: ScaleFactors) -> BBox {
    if scale == ScaleFactors::UNIT {
        return *b;
    }
    BBox { x0: b.x0 / scale.sx, y0: b.y0 / scale.sy, x1: b.x1 / scale.sx, y1: b.y1 / scale.sy }
}
