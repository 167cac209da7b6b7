//! Brute-force reference implementations, transcribed directly from the
//! metric and suppression definitions. They share no code with the library
//! paths they check.

#![allow(dead_code)]

use vtloc_core::decode::{Candidate, CandidateSet};
use vtloc_core::geom::Segment;
use vtloc_core::metrics::VideoSegment;

/// Interval IoU written out longhand.
pub fn ref_iou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter_start = if a_start > b_start { a_start } else { b_start };
    let inter_end = if a_end < b_end { a_end } else { b_end };
    let inter = if inter_end > inter_start {
        inter_end - inter_start
    } else {
        0.0
    };
    let union = (a_end - a_start) + (b_end - b_start) - inter;
    if union <= 0.0 {
        if a_start == b_start && a_end == b_end {
            1.0
        } else {
            0.0
        }
    } else {
        inter / union
    }
}

/// Gaussian SoftNMS transcribed from its iterative definition: per class,
/// repeatedly take the highest-scoring remaining segment (ties: earliest
/// original index), decay all other remaining scores by exp(-iou^2/sigma),
/// drop decayed scores below `min_score`; sort the survivors by score.
pub fn soft_nms_reference(cands: &CandidateSet, sigma: f64, min_score: f64) -> CandidateSet {
    #[derive(Clone)]
    struct Entry {
        orig: usize,
        cand: Candidate,
        score: f64,
    }

    let mut classes: Vec<usize> = cands.items.iter().map(|c| c.segment.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut survivors: Vec<Entry> = Vec::new();
    for class in classes {
        let mut remaining: Vec<Entry> = cands
            .items
            .iter()
            .enumerate()
            .filter(|(_, c)| c.segment.class_id == class)
            .map(|(orig, c)| Entry {
                orig,
                cand: *c,
                score: c.segment.score.unwrap_or(0.0),
            })
            .collect();
        while !remaining.is_empty() {
            let mut best = 0usize;
            for j in 1..remaining.len() {
                let better = remaining[j].score > remaining[best].score
                    || (remaining[j].score == remaining[best].score
                        && remaining[j].orig < remaining[best].orig);
                if better {
                    best = j;
                }
            }
            let mut winner = remaining.remove(best);
            winner.cand.segment.score = Some(winner.score);
            for other in remaining.iter_mut() {
                let iou = ref_iou(
                    winner.cand.segment.start,
                    winner.cand.segment.end,
                    other.cand.segment.start,
                    other.cand.segment.end,
                );
                other.score *= libm::exp(-(iou * iou) / sigma);
            }
            remaining.retain(|e| e.score >= min_score);
            survivors.push(winner);
        }
    }
    survivors.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.orig.cmp(&b.orig))
    });
    CandidateSet {
        items: survivors.into_iter().map(|e| e.cand).collect(),
    }
}

/// Detection AP by exhaustive scanning: greedy matching in score order, a
/// precision/recall point per rank, step-function area with a running-max
/// scan instead of an envelope precompute.
pub fn average_precision_reference(
    preds: &[VideoSegment],
    gts: &[VideoSegment],
    threshold: f64,
) -> f64 {
    if gts.is_empty() || preds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a].segment, &preds[b].segment);
        pb.score
            .unwrap_or(0.0)
            .partial_cmp(&pa.score.unwrap_or(0.0))
            .unwrap()
            .then(pa.start.partial_cmp(&pb.start).unwrap())
            .then(preds[a].video.cmp(&preds[b].video))
    });
    let mut used = vec![false; gts.len()];
    let mut hits: Vec<bool> = Vec::new();
    for &pi in &order {
        let p = &preds[pi];
        let mut best_gt: Option<usize> = None;
        let mut best_iou = -1.0f64;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.video != p.video {
                continue;
            }
            let iou = ref_iou(p.segment.start, p.segment.end, g.segment.start, g.segment.end);
            if iou >= threshold && iou > best_iou {
                best_iou = iou;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            used[gi] = true;
            hits.push(true);
        } else {
            hits.push(false);
        }
    }
    // Recall/precision per rank.
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Area: at each recall step, scan forward for the max precision.
    let mut area = 0.0;
    let mut prev = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev {
            let mut max_prec = 0.0f64;
            for &(_, p) in &points[i..] {
                if p > max_prec {
                    max_prec = p;
                }
            }
            area += (recall - prev) * max_prec;
            prev = recall;
        }
    }
    area
}

pub fn map_reference(
    preds_by_class: &[Vec<VideoSegment>],
    gts_by_class: &[Vec<VideoSegment>],
    threshold: f64,
) -> (f64, Vec<(usize, f64)>) {
    let n_classes = preds_by_class.len().max(gts_by_class.len());
    let empty: Vec<VideoSegment> = Vec::new();
    let mut per_class = Vec::new();
    for c in 0..n_classes {
        let gts = gts_by_class.get(c).unwrap_or(&empty);
        if gts.is_empty() {
            continue;
        }
        let preds = preds_by_class.get(c).unwrap_or(&empty);
        per_class.push((c, average_precision_reference(preds, gts, threshold)));
    }
    if per_class.is_empty() {
        (0.0, per_class)
    } else {
        let mean = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
        (mean, per_class)
    }
}

/// Recall@K transcribed: a query counts when any of its k highest-scoring
/// predictions exceeds the IoU threshold against any ground truth.
pub fn recall_reference(
    queries: &[(Vec<Segment>, Vec<Segment>)],
    k: usize,
    threshold: f64,
) -> f64 {
    let mut hits = 0usize;
    for (preds, gts) in queries {
        let mut ranked: Vec<&Segment> = preds.iter().collect();
        ranked.sort_by(|a, b| {
            b.score
                .unwrap_or(0.0)
                .partial_cmp(&a.score.unwrap_or(0.0))
                .unwrap()
                .then(a.start.partial_cmp(&b.start).unwrap())
                .then(a.class_id.cmp(&b.class_id))
        });
        let mut hit = false;
        for p in ranked.iter().take(k) {
            for g in gts {
                if ref_iou(p.start, p.end, g.start, g.end) > threshold {
                    hit = true;
                }
            }
        }
        if hit {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}
