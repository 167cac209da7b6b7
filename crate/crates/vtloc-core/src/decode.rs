//! From dense predictions to scored segments: displacement expansion,
//! score thresholding, Gaussian SoftNMS and ranked cuts.

use alloc::vec::Vec;
use core::fmt;

use crate::geom::{iou_unchecked, FrameGrid, Segment};
use crate::heads::DensePredictions;
use crate::mat::scalar;

/// A decoded segment plus where it came from.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub segment: Segment,
    pub level: usize,
    pub cell: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CandidateSet {
    pub items: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.items.iter().map(|c| &c.segment)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeError {
    ShapeMismatch { level: usize, expected: usize, got: usize },
    BadSigma(f64),
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::ShapeMismatch { level, expected, got } => write!(
                f,
                "level {level}: grid expects {expected} cells, predictions have {got}"
            ),
            DecodeError::BadSigma(s) => write!(f, "soft-nms sigma must be positive, got {s}"),
        }
    }
}

impl core::error::Error for DecodeError {}

/// Expand each cell into a segment: [t - ds*stride, t + de*stride] clipped
/// to [0, N-1], scored by the sigmoid of its relevancy logit. Candidates
/// scoring below `score_threshold` are dropped.
pub fn expand(
    preds: &DensePredictions,
    grid: &FrameGrid,
    score_threshold: f64,
) -> Result<CandidateSet, DecodeError> {
    let horizon = (grid.n_frames - 1) as f64;
    let mut items = Vec::new();
    for (l, level) in preds.levels.iter().enumerate() {
        let expected = grid.level(l).len;
        if level.relevancy.len() != expected || level.displacements.rows() != expected {
            return Err(DecodeError::ShapeMismatch {
                level: l,
                expected,
                got: level.relevancy.len(),
            });
        }
        let stride = grid.level(l).stride as f64;
        for i in 0..expected {
            let score = scalar::sigmoid(level.relevancy[i]) as f64;
            if score < score_threshold {
                continue;
            }
            let t = grid.timestamp(l, i);
            let ds = level.displacements.at(i, 0) as f64 * stride;
            let de = level.displacements.at(i, 1) as f64 * stride;
            let start = (t - ds).clamp(0.0, horizon);
            let end = (t + de).clamp(0.0, horizon);
            items.push(Candidate {
                segment: Segment {
                    start,
                    end,
                    class_id: preds.class_id,
                    score: Some(score),
                },
                level: l,
                cell: i,
            });
        }
    }
    Ok(CandidateSet { items })
}

fn score_of(c: &Candidate) -> f64 {
    c.segment.score.unwrap_or(0.0)
}

/// Gaussian SoftNMS, applied independently within each class.
///
/// Iteratively picks the highest-scoring remaining candidate, decays every
/// other remaining score by exp(-IoU^2 / sigma), and drops candidates whose
/// decayed score falls below `min_score`. Output is sorted by decayed score
/// descending (ties resolved by original candidate order).
pub fn soft_nms(
    cands: &CandidateSet,
    sigma: f64,
    min_score: f64,
) -> Result<CandidateSet, DecodeError> {
    if !(sigma > 0.0) {
        return Err(DecodeError::BadSigma(sigma));
    }
    let mut class_ids: Vec<usize> = cands.items.iter().map(|c| c.segment.class_id).collect();
    class_ids.sort_unstable();
    class_ids.dedup();

    let mut survivors: Vec<(usize, Candidate)> = Vec::new();
    for class_id in class_ids {
        // (original index, candidate, live score)
        let mut pool: Vec<(usize, Candidate, f64)> = cands
            .items
            .iter()
            .enumerate()
            .filter(|(_, c)| c.segment.class_id == class_id)
            .map(|(i, c)| (i, *c, score_of(c)))
            .collect();
        while !pool.is_empty() {
            // Ties on the live score resolve to the earliest original
            // candidate so reorderings of the pool cannot change results.
            let mut best = 0;
            for j in 1..pool.len() {
                if pool[j].2 > pool[best].2
                    || (pool[j].2 == pool[best].2 && pool[j].0 < pool[best].0)
                {
                    best = j;
                }
            }
            let (orig, mut winner, score) = pool.swap_remove(best);
            winner.segment.score = Some(score);
            survivors.push((orig, winner));
            for (_, cand, live) in pool.iter_mut() {
                let iou = iou_unchecked(
                    winner.segment.start,
                    winner.segment.end,
                    cand.segment.start,
                    cand.segment.end,
                );
                *live *= libm::exp(-(iou * iou) / sigma);
            }
            pool.retain(|&(_, _, live)| live >= min_score);
        }
    }
    survivors.sort_by(|a, b| {
        score_of(&b.1)
            .total_cmp(&score_of(&a.1))
            .then(a.0.cmp(&b.0))
    });
    Ok(CandidateSet {
        items: survivors.into_iter().map(|(_, c)| c).collect(),
    })
}

/// The k highest-scoring candidates; ties break toward earlier start, then
/// lower class id, then provenance for full determinism.
pub fn top_k(cands: &CandidateSet, k: usize) -> CandidateSet {
    let mut items = cands.items.clone();
    items.sort_by(|a, b| {
        score_of(b)
            .total_cmp(&score_of(a))
            .then(a.segment.start.total_cmp(&b.segment.start))
            .then(a.segment.class_id.cmp(&b.segment.class_id))
            .then(a.level.cmp(&b.level))
            .then(a.cell.cmp(&b.cell))
    });
    items.truncate(k);
    CandidateSet { items }
}
