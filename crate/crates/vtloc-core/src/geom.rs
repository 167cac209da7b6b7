//! Temporal geometry: segments, IoU and the multi-resolution frame grid.
//!
//! All internal geometry lives in frame-index coordinates (fractional
//! allowed); conversion to seconds happens only at I/O boundaries through
//! `seconds_per_frame`.

use alloc::vec::Vec;
use core::fmt;

/// A temporal interval with class/caption identity and an optional score.
///
/// `class_id` indexes the text set: a class label for TAL/AS, a caption
/// index for MR. Ground truth carries no score.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeomError {
    /// end < start, or a score outside [0, 1].
    InvalidSegment { start: f64, end: f64 },
    InvalidScore(f64),
    /// n_frames too small for the requested pyramid depth.
    GridTooShallow { n_frames: usize, n_levels: usize },
    NonPositiveSecondsPerFrame(f64),
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::InvalidSegment { start, end } => {
                write!(f, "invalid segment: end {end} < start {start}")
            }
            GeomError::InvalidScore(s) => write!(f, "segment score {s} outside [0, 1]"),
            GeomError::GridTooShallow { n_frames, n_levels } => write!(
                f,
                "{n_frames} frames cannot support a {n_levels}-level grid (need at least 2^(L-1))"
            ),
            GeomError::NonPositiveSecondsPerFrame(s) => {
                write!(f, "seconds_per_frame must be positive, got {s}")
            }
        }
    }
}

impl core::error::Error for GeomError {}

impl Segment {
    pub fn new(start: f64, end: f64, class_id: usize) -> Result<Self, GeomError> {
        if !(end >= start) {
            return Err(GeomError::InvalidSegment { start, end });
        }
        Ok(Self {
            start,
            end,
            class_id,
            score: None,
        })
    }

    pub fn with_score(start: f64, end: f64, class_id: usize, score: f64) -> Result<Self, GeomError> {
        let mut seg = Self::new(start, end, class_id)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(GeomError::InvalidScore(score));
        }
        seg.score = Some(score);
        Ok(seg)
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0.0
    }

    pub fn is_valid(&self) -> bool {
        self.end >= self.start && self.score.map_or(true, |s| (0.0..=1.0).contains(&s))
    }
}

/// Temporal IoU of two segments, in [0, 1].
///
/// Coincident zero-length segments count as identical (IoU 1); any other
/// zero-length union resolves to 0 rather than dividing by zero.
pub fn temporal_iou(a: &Segment, b: &Segment) -> Result<f64, GeomError> {
    for s in [a, b] {
        if s.end < s.start {
            return Err(GeomError::InvalidSegment {
                start: s.start,
                end: s.end,
            });
        }
    }
    Ok(iou_unchecked(a.start, a.end, b.start, b.end))
}

/// IoU on raw endpoints; callers guarantee end >= start.
#[inline]
pub fn iou_unchecked(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
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

/// Per-level cell layout of the temporal feature pyramid.
///
/// Level l (1-based) has stride 2^(l-1) and exactly floor(N / 2^(l-1))
/// cells; cell i sits at time i * stride in frame-index units.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameGrid {
    pub n_frames: usize,
    pub seconds_per_frame: f64,
    levels: Vec<GridLevel>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridLevel {
    pub stride: usize,
    pub len: usize,
}

impl FrameGrid {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &GridLevel {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    /// Timestamp of cell `i` at 0-based level `l`, in frame indices.
    #[inline]
    pub fn timestamp(&self, l: usize, i: usize) -> f64 {
        (i * self.levels[l].stride) as f64
    }

    pub fn timestamps(&self, l: usize) -> impl Iterator<Item = f64> + '_ {
        let stride = self.levels[l].stride;
        (0..self.levels[l].len).map(move |i| (i * stride) as f64)
    }

    /// Total cell count over all levels; with C classes the model emits
    /// C times this many predictions.
    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(|lv| lv.len).sum()
    }
}

/// Build the per-level grid for `n_frames` frames and `n_levels` levels.
pub fn make_frame_grid(
    n_frames: usize,
    n_levels: usize,
    seconds_per_frame: f64,
) -> Result<FrameGrid, GeomError> {
    if n_levels == 0 || n_frames < (1usize << (n_levels - 1)) {
        return Err(GeomError::GridTooShallow { n_frames, n_levels });
    }
    if !(seconds_per_frame > 0.0) {
        return Err(GeomError::NonPositiveSecondsPerFrame(seconds_per_frame));
    }
    let mut levels = Vec::with_capacity(n_levels);
    let mut len = n_frames;
    let mut stride = 1usize;
    for _ in 0..n_levels {
        levels.push(GridLevel { stride, len });
        len /= 2;
        stride *= 2;
    }
    Ok(FrameGrid {
        n_frames,
        seconds_per_frame,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn iou_identity() {
        let a = Segment::new(0.0, 2.0, 0).unwrap();
        assert_eq!(temporal_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_partial_overlap() {
        let a = Segment::new(0.0, 2.0, 0).unwrap();
        let b = Segment::new(1.0, 3.0, 0).unwrap();
        let v = temporal_iou(&a, &b).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn iou_disjoint() {
        let a = Segment::new(0.0, 1.0, 0).unwrap();
        let b = Segment::new(2.0, 3.0, 0).unwrap();
        assert_eq!(temporal_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_inverted_segment() {
        let a = Segment {
            start: 2.0,
            end: 1.0,
            class_id: 0,
            score: None,
        };
        let b = Segment::new(0.0, 1.0, 0).unwrap();
        assert!(temporal_iou(&a, &b).is_err());
    }

    #[test]
    fn iou_zero_length_conventions() {
        let p = Segment::new(2.0, 2.0, 0).unwrap();
        let q = Segment::new(2.0, 2.0, 0).unwrap();
        let r = Segment::new(3.0, 3.0, 0).unwrap();
        let wide = Segment::new(0.0, 4.0, 0).unwrap();
        assert_eq!(temporal_iou(&p, &q).unwrap(), 1.0);
        assert_eq!(temporal_iou(&p, &r).unwrap(), 0.0);
        assert_eq!(temporal_iou(&p, &wide).unwrap(), 0.0);
    }

    #[test]
    fn iou_symmetric_bounded_and_one_iff_identical() {
        let mut rng = Rng::new(42);
        for _ in 0..500 {
            let s1 = rng.range_f64(0.0, 50.0);
            let e1 = s1 + rng.range_f64(0.1, 20.0);
            let s2 = rng.range_f64(0.0, 50.0);
            let e2 = s2 + rng.range_f64(0.1, 20.0);
            let a = Segment::new(s1, e1, 0).unwrap();
            let b = Segment::new(s2, e2, 0).unwrap();
            let ab = temporal_iou(&a, &b).unwrap();
            let ba = temporal_iou(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
            assert_eq!(ab == 1.0, s1 == s2 && e1 == e2);
        }
    }

    #[test]
    fn grid_counts_match_halving_law() {
        let g = make_frame_grid(128, 3, 0.1).unwrap();
        let lens: Vec<usize> = g.levels().iter().map(|l| l.len).collect();
        assert_eq!(lens, vec![128, 64, 32]);
        assert_eq!(g.total_cells(), 224);

        let g4 = make_frame_grid(128, 4, 0.1).unwrap();
        assert_eq!(g4.total_cells(), 240);
    }

    #[test]
    fn grid_single_level() {
        let g = make_frame_grid(8, 1, 1.0).unwrap();
        assert_eq!(g.level(0).len, 8);
        assert_eq!(g.level(0).stride, 1);
        let ts: Vec<f64> = g.timestamps(0).collect();
        assert_eq!(ts, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn grid_rejects_too_few_frames() {
        assert!(make_frame_grid(7, 4, 1.0).is_err());
        assert!(make_frame_grid(8, 4, 1.0).is_ok());
    }

    #[test]
    fn grid_consecutive_levels_halve_with_floor() {
        for n in [37, 64, 100, 129] {
            let g = make_frame_grid(n, 4, 1.0).unwrap();
            for l in 1..4 {
                assert_eq!(g.level(l).len, g.level(l - 1).len / 2);
            }
        }
    }

    #[test]
    fn grid_upper_timestamps_subsample_level_one() {
        let g = make_frame_grid(64, 3, 1.0).unwrap();
        let base: Vec<f64> = g.timestamps(0).collect();
        for l in 1..3 {
            let stride = g.level(l).stride;
            for (i, t) in g.timestamps(l).enumerate() {
                assert_eq!(t, base[i * stride]);
            }
        }
    }
}
