//! Evaluation: Recall@K at IoU thresholds (MR), mAP at an IoU threshold
//! (TAL), frame accuracy and background-excluded mAP (AS).
//!
//! All metrics sort their inputs internally (score descending with the
//! decode tie-break), so prediction order never matters. AP uses all-point
//! interpolation: the area under the precision envelope.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::config::Task;
use crate::geom::{iou_unchecked, Segment};
use crate::mat::Mat;

/// A segment tied to the video it lives in; matching never crosses videos.
#[derive(Clone, Copy, Debug)]
pub struct VideoSegment {
    pub video: usize,
    pub segment: Segment,
}

/// One retrieval query: ranked candidates against its ground-truth moments.
#[derive(Clone, Debug)]
pub struct Query {
    pub preds: Vec<Segment>,
    pub gts: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsError {
    EmptyQuerySet,
    QueryWithoutGroundTruth(usize),
    LengthMismatch { preds: usize, gts: usize },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyQuerySet => write!(f, "recall over an empty query set is undefined"),
            MetricsError::QueryWithoutGroundTruth(i) => {
                write!(f, "query {i} has no ground-truth segment")
            }
            MetricsError::LengthMismatch { preds, gts } => {
                write!(f, "label streams differ in length: {preds} vs {gts}")
            }
        }
    }
}

impl core::error::Error for MetricsError {}

fn sort_by_score(segments: &mut [Segment]) {
    segments.sort_by(|a, b| {
        b.score
            .unwrap_or(0.0)
            .total_cmp(&a.score.unwrap_or(0.0))
            .then(a.start.total_cmp(&b.start))
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Fraction of queries whose top-k predictions contain at least one segment
/// with IoU strictly larger than the threshold against any ground truth.
/// Returns one recall per threshold.
pub fn recall_at_k(
    queries: &[Query],
    k: usize,
    iou_thresholds: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    if queries.is_empty() {
        return Err(MetricsError::EmptyQuerySet);
    }
    for (i, q) in queries.iter().enumerate() {
        if q.gts.is_empty() {
            return Err(MetricsError::QueryWithoutGroundTruth(i));
        }
    }
    let mut recalls = Vec::with_capacity(iou_thresholds.len());
    for &thresh in iou_thresholds {
        let mut hits = 0usize;
        for q in queries {
            let mut ranked = q.preds.clone();
            sort_by_score(&mut ranked);
            let hit = ranked.iter().take(k).any(|p| {
                q.gts
                    .iter()
                    .any(|g| iou_unchecked(p.start, p.end, g.start, g.end) > thresh)
            });
            if hit {
                hits += 1;
            }
        }
        recalls.push(hits as f64 / queries.len() as f64);
    }
    Ok(recalls)
}

#[derive(Clone, Debug)]
pub struct MapResult {
    pub mean_ap: f64,
    /// (class_id, ap) for every class with at least one ground truth.
    pub per_class: Vec<(usize, f64)>,
}

/// Detection mAP at one IoU threshold: greedy one-to-one matching per class
/// (score order, best remaining IoU >= threshold in the same video), AP as
/// the area under the interpolated precision-recall curve, averaged over
/// classes that have ground truth.
pub fn map_at_iou(
    preds_by_class: &[Vec<VideoSegment>],
    gts_by_class: &[Vec<VideoSegment>],
    threshold: f64,
) -> MapResult {
    let n_classes = preds_by_class.len().max(gts_by_class.len());
    let mut per_class = Vec::new();
    for c in 0..n_classes {
        let empty = Vec::new();
        let gts = gts_by_class.get(c).unwrap_or(&empty);
        if gts.is_empty() {
            continue;
        }
        let preds = preds_by_class.get(c).unwrap_or(&empty);
        per_class.push((c, average_precision(preds, gts, threshold)));
    }
    let mean_ap = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    MapResult { mean_ap, per_class }
}

fn average_precision(preds: &[VideoSegment], gts: &[VideoSegment], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    if preds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a].segment, &preds[b].segment);
        pb.score
            .unwrap_or(0.0)
            .total_cmp(&pa.score.unwrap_or(0.0))
            .then(pa.start.total_cmp(&pb.start))
            .then(preds[a].video.cmp(&preds[b].video))
    });

    let mut gt_used = alloc::vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[gi] || g.video != p.video {
                continue;
            }
            let iou = iou_unchecked(p.segment.start, p.segment.end, g.segment.start, g.segment.end);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }

    // Precision-recall points in rank order, then the envelope area.
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(is_tp.len());
    for (rank, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((
            tp as f64 / gts.len() as f64,
            tp as f64 / (rank + 1) as f64,
        ));
    }
    envelope_area(&points)
}

/// Area under the running-max-from-the-right precision over recall steps.
fn envelope_area(points: &[(f64, f64)]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            area += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    area
}

/// Exact-match fraction over frames, background included. `None` means
/// background.
pub fn frame_accuracy(
    pred_labels: &[Option<usize>],
    gt_labels: &[Option<usize>],
) -> Result<f64, MetricsError> {
    if pred_labels.len() != gt_labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: pred_labels.len(),
            gts: gt_labels.len(),
        });
    }
    if pred_labels.is_empty() {
        return Ok(0.0);
    }
    let correct = pred_labels
        .iter()
        .zip(gt_labels.iter())
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / pred_labels.len() as f64)
}

/// Per-frame retrieval mAP over classes, background excluded: each class's
/// score column ranks all frames, AP is the mean precision at the ranks of
/// that class's frames, and the mean runs over classes present in the
/// ground truth.
pub fn segmentation_map(
    per_frame_scores: &Mat,
    gt_labels: &[Option<usize>],
) -> Result<MapResult, MetricsError> {
    if per_frame_scores.rows() != gt_labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: per_frame_scores.rows(),
            gts: gt_labels.len(),
        });
    }
    let n_frames = gt_labels.len();
    let mut per_class = Vec::new();
    for c in 0..per_frame_scores.cols() {
        let positives = gt_labels.iter().filter(|g| **g == Some(c)).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n_frames).collect();
        order.sort_by(|&a, &b| {
            per_frame_scores
                .at(b, c)
                .total_cmp(&per_frame_scores.at(a, c))
                .then(a.cmp(&b))
        });
        let mut tp = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &frame) in order.iter().enumerate() {
            if gt_labels[frame] == Some(c) {
                tp += 1;
                precision_sum += tp as f64 / (rank + 1) as f64;
            }
        }
        per_class.push((c, precision_sum / positives as f64));
    }
    let mean_ap = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(MapResult { mean_ap, per_class })
}

/// Named metric values for one evaluation run.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub task: Task,
    /// Insertion-ordered (name, value) pairs, all in [0, 1].
    pub metrics: Vec<(String, f64)>,
    pub per_class_ap: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    /// Plain-text table, one metric per row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let task = match self.task {
            Task::Mr => "mr",
            Task::Tal => "tal",
            Task::As => "as",
        };
        out.push_str(&format!("task: {task}\n"));
        let width = self
            .metrics
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(8)
            .max(8);
        for (name, value) in &self.metrics {
            out.push_str(&format!("{name:<width$}  {value:.4}\n"));
        }
        if !self.per_class_ap.is_empty() {
            out.push_str("per-class AP:\n");
            for (class, ap) in &self.per_class_ap {
                out.push_str(&format!("  class {class:<4} {ap:.4}\n"));
            }
        }
        out
    }
}
