//! COCO-style detection accuracy.
//!
//! Conventions: at most [`MAX_DETECTIONS_PER_FRAME`] detections per frame,
//! greedy matching in confidence order, 101-point interpolated AP, classes
//! without ground truth left out of the class mean, one area range.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::vision::{confidence_order, iou, Detection, GroundTruthBox};

pub const MAX_DETECTIONS_PER_FRAME: usize = 100;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
}

/// Matching outcome for one class: labels in processing order (descending
/// confidence) and the number of ground-truth boxes of that class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMatches {
    pub labels: Vec<MatchLabel>,
    pub confidences: Vec<f64>,
    pub gt_count: usize,
}

/// Detections per frame, keyed by frame id.
pub type FrameDetections = BTreeMap<u64, Vec<Detection>>;
/// Ground truth per frame, keyed by frame id.
pub type FrameGroundTruth = BTreeMap<u64, Vec<GroundTruthBox>>;

/// Groups ground-truth boxes by their frame id.
pub fn group_ground_truth<'a>(gts: impl IntoIterator<Item = &'a GroundTruthBox>) -> FrameGroundTruth {
    let mut out = FrameGroundTruth::new();
    for g in gts {
        out.entry(g.frame_id).or_default().push(*g);
    }
    out
}

/// Keeps the `MAX_DETECTIONS_PER_FRAME` most confident detections of a frame,
/// returned with their original indices.
fn capped(dets: &[Detection]) -> Vec<(usize, Detection)> {
    let mut order = confidence_order(dets);
    order.truncate(MAX_DETECTIONS_PER_FRAME);
    order.sort_unstable();
    order.into_iter().map(|i| (i, dets[i])).collect()
}

/// Greedy matching of detections to ground truth at one IoU threshold.
///
/// Detections of a class are taken in descending confidence (ties: lower
/// frame id, then lower index within the frame). Each one claims the still
/// unmatched same-class box in its frame with the highest IoU, provided that
/// IoU is at least `iou_threshold`; ties go to the lower box index.
pub fn match_detections(
    dets: &FrameDetections,
    gts: &FrameGroundTruth,
    iou_threshold: f64,
) -> BTreeMap<u32, ClassMatches> {
    let mut out: BTreeMap<u32, ClassMatches> = BTreeMap::new();
    for boxes in gts.values() {
        for g in boxes {
            out.entry(g.class_id).or_default().gt_count += 1;
        }
    }

    // (class, frame, index, detection)
    let mut queue: Vec<(u32, u64, usize, Detection)> = Vec::new();
    for (&frame_id, frame_dets) in dets {
        for (idx, d) in capped(frame_dets) {
            queue.push((d.class_id, frame_id, idx, d));
        }
    }
    queue.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.3.confidence.total_cmp(&a.3.confidence))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let empty = Vec::new();
    let mut claimed: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    for (class_id, frame_id, _, d) in queue {
        let frame_gts = gts.get(&frame_id).unwrap_or(&empty);
        let taken = claimed.entry(frame_id).or_insert_with(|| vec![false; frame_gts.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in frame_gts.iter().enumerate() {
            if g.class_id != class_id || taken[gi] {
                continue;
            }
            let overlap = iou(&d.bbox, &g.bbox);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        let entry = out.entry(class_id).or_default();
        entry.confidences.push(d.confidence);
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                entry.labels.push(MatchLabel::TruePositive);
            }
            None => entry.labels.push(MatchLabel::FalsePositive),
        }
    }
    out
}

/// 101-point interpolated average precision.
///
/// `labels` must be in descending confidence order. For each recall level
/// r in {0.00, 0.01, ..., 1.00} the interpolated precision is the best
/// precision reached at any recall >= r (0 if r is never reached); AP is
/// their mean. Returns 0 when `gt_count` is 0.
pub fn average_precision(labels: &[MatchLabel], gt_count: usize) -> f64 {
    if gt_count == 0 || labels.is_empty() {
        return 0.0;
    }
    let mut true_pos = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, label) in labels.iter().enumerate() {
        if *label == MatchLabel::TruePositive {
            tp += 1;
        }
        true_pos.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }

    // recall_k >= r/100  <=>  tp_k * 100 >= r * gt_count
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100usize {
        while k < true_pos.len() && true_pos[k] * 100 < r * gt_count {
            k += 1;
        }
        if k == true_pos.len() {
            break;
        }
        sum += precision[k];
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map_50_95: f64,
    pub per_iou_map: [f64; 10],
    /// Classes that contributed to the mean.
    pub class_count: usize,
}

/// Mean AP over classes with ground truth, at each of the ten IoU thresholds,
/// then averaged over thresholds. Detections for frames or classes with no
/// ground truth count as false positives or are ignored, respectively.
pub fn map_50_95(dets: &FrameDetections, gts: &FrameGroundTruth) -> Result<MapSummary, MetricsError> {
    let gt_total: usize = gts.values().map(Vec::len).sum();
    if gt_total == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut per_iou_map = [0.0; 10];
    let mut class_count = 0;
    for (slot, &thr) in per_iou_map.iter_mut().zip(IOU_THRESHOLDS.iter()) {
        let matches = match_detections(dets, gts, thr);
        let aps: Vec<f64> = matches
            .values()
            .filter(|m| m.gt_count > 0)
            .map(|m| average_precision(&m.labels, m.gt_count))
            .collect();
        class_count = aps.len();
        *slot = aps.iter().sum::<f64>() / aps.len() as f64;
    }
    let map = per_iou_map.iter().sum::<f64>() / per_iou_map.len() as f64;
    Ok(MapSummary { map_50_95: map, per_iou_map, class_count })
}
