//! Synthetic untrimmed videos, annotation records, frame samplers, prompt
//! templates and the word-level vocabulary.
//!
//! Synthetic videos plant class-signature feature rows inside background
//! noise. Signatures are mutually orthogonal unit vectors, so a linear
//! encoder can separate them and end-to-end experiments measure the
//! localization machinery rather than representation learning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::config::Task;
use crate::encoders::{StubTextEncoder, TextTokens};
use crate::geom::Segment;
use crate::mat::Mat;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    InfeasiblePacking { video: usize, needed: usize, available: usize },
    TooManyClasses { classes: usize, feature_dim: usize },
    EmptyTemplateSet,
    BadTemplate(String),
    EmptyVideo,
    BadSampleCount(usize),
    AnnotationOutOfBounds { video: String, record: usize, field: &'static str },
    UnknownLabel { video: String, record: usize, label: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InfeasiblePacking { video, needed, available } => write!(
                f,
                "video {video}: events need {needed} frames but only {available} available"
            ),
            DataError::TooManyClasses { classes, feature_dim } => write!(
                f,
                "{classes} orthogonal signatures cannot fit in {feature_dim} dimensions"
            ),
            DataError::EmptyTemplateSet => write!(f, "prompt set needs at least one template"),
            DataError::BadTemplate(t) => {
                write!(f, "template must contain exactly one {{label}} slot: {t:?}")
            }
            DataError::EmptyVideo => write!(f, "cannot sample frames from an empty video"),
            DataError::BadSampleCount(n) => write!(f, "cannot sample {n} frames"),
            DataError::AnnotationOutOfBounds { video, record, field } => {
                write!(f, "video {video:?} segment {record}: {field} outside [0, duration]")
            }
            DataError::UnknownLabel { video, record, label } => {
                write!(f, "video {video:?} segment {record}: label {label:?} not in class list")
            }
        }
    }
}

impl core::error::Error for DataError {}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Whitespace word-level vocabulary; id 0 is reserved for unknown words.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocab {
    /// Deterministic: unique words sorted lexicographically after `<unk>`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut unique: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect();
        unique.sort();
        unique.dedup();
        let mut words = vec![UNK_TOKEN.to_string()];
        words.extend(unique);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(0))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

pub const LABEL_SLOT: &str = "{label}";

/// Ordered templates with a single `{label}` slot each.
#[derive(Clone, Debug)]
pub struct PromptSet {
    templates: Vec<String>,
    pub ensemble_size: usize,
}

impl PromptSet {
    pub fn new(templates: Vec<String>, ensemble_size: usize) -> Result<Self, DataError> {
        if templates.is_empty() {
            return Err(DataError::EmptyTemplateSet);
        }
        for t in &templates {
            if t.matches(LABEL_SLOT).count() != 1 {
                return Err(DataError::BadTemplate(t.clone()));
            }
        }
        let ensemble_size = ensemble_size.clamp(1, templates.len());
        Ok(Self {
            templates,
            ensemble_size,
        })
    }

    pub fn kinetics_style() -> Self {
        Self::new(
            vec![
                "a video of a person doing {label}".to_string(),
                "a person is performing {label}".to_string(),
                "footage showing the activity {label}".to_string(),
                "watch somebody {label} on camera".to_string(),
            ],
            4,
        )
        .unwrap()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render(&self, index: usize, label: &str) -> String {
        self.templates[index].replace(LABEL_SLOT, label)
    }
}

/// Encode a class label through prompt templates.
///
/// Without ensembling this is template 0 rendered and encoded. With
/// ensembling the per-template summary embeddings are averaged and rescaled
/// to their mean norm, packaged as a single summary-only token usable
/// anywhere a CLS token is.
pub fn apply_prompts(
    label: &str,
    prompts: &PromptSet,
    vocab: &Vocab,
    encoder: &StubTextEncoder,
    max_tokens: usize,
    ensemble: bool,
) -> Result<TextTokens, crate::encoders::EncoderError> {
    if !ensemble || prompts.ensemble_size == 1 {
        let ids = vocab.encode(&prompts.render(0, label));
        return Ok(encoder.encode(&ids, max_tokens)?.0);
    }
    let width = encoder.width();
    let mut sum = vec![0.0f32; width];
    let mut norm_sum = 0.0f32;
    let n = prompts.ensemble_size;
    for i in 0..n {
        let ids = vocab.encode(&prompts.render(i, label));
        let (tokens, _) = encoder.encode(&ids, max_tokens)?;
        let cls = tokens.cls_row();
        let norm: f32 = crate::mat::scalar::sqrt(cls.iter().map(|v| v * v).sum::<f32>());
        norm_sum += norm;
        for (s, &v) in sum.iter_mut().zip(cls.iter()) {
            *s += v;
        }
    }
    let inv_n = 1.0 / n as f32;
    sum.iter_mut().for_each(|v| *v *= inv_n);
    let mean_norm = norm_sum * inv_n;
    let avg_norm: f32 = crate::mat::scalar::sqrt(sum.iter().map(|v| v * v).sum::<f32>());
    if avg_norm > 0.0 {
        let scale = mean_norm / avg_norm;
        sum.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(TextTokens {
        tokens: Mat::from_vec(1, width, sum),
        mask: vec![true],
        cls_index: 0,
    })
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub n_classes: usize,
    /// Inclusive frame-count range per video.
    pub frames_per_video: (usize, usize),
    /// Inclusive event-count range per video (ignored when a background
    /// fraction target drives placement).
    pub events_per_video: (usize, usize),
    /// Inclusive event-length buckets, sized to hit different pyramid
    /// levels' displacement ranges.
    pub event_lengths: Vec<(usize, usize)>,
    /// Raw encoder-input width.
    pub feature_dim: usize,
    pub noise_std: f64,
    /// When set, events are packed until roughly (1 - target) of the frames
    /// are covered.
    pub background_fraction: Option<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Multi-scale TAL defaults: buckets exercising pyramid levels 1-3.
    pub fn multi_scale_tal(n_videos: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            n_videos,
            n_classes,
            frames_per_video: (128, 128),
            events_per_video: (2, 4),
            event_lengths: vec![(3, 7), (10, 15), (36, 56)],
            feature_dim: 16,
            noise_std: 0.3,
            background_fraction: None,
            seed,
        }
    }
}

/// One generated untrimmed video: raw feature rows plus exact ground truth
/// in source frame-index units (segments span [first, last] frame).
#[derive(Clone, Debug)]
pub struct SourceVideo {
    pub id: usize,
    pub frames: Mat,
    pub gts: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub videos: Vec<SourceVideo>,
    /// Unit-norm orthogonal rows, one per class.
    pub signatures: Mat,
    pub n_classes: usize,
}

impl SyntheticDataset {
    /// Per-frame labels for segmentation tasks; None is background.
    pub fn frame_labels(&self, video: &SourceVideo) -> Vec<Option<usize>> {
        let mut labels = vec![None; video.frames.rows()];
        for gt in &video.gts {
            let lo = gt.start as usize;
            let hi = (gt.end as usize).min(labels.len() - 1);
            for slot in labels.iter_mut().take(hi + 1).skip(lo) {
                *slot = Some(gt.class_id);
            }
        }
        labels
    }

    pub fn background_fraction(&self) -> f64 {
        let mut total = 0usize;
        let mut background = 0usize;
        for v in &self.videos {
            for label in self.frame_labels(v) {
                total += 1;
                if label.is_none() {
                    background += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            background as f64 / total as f64
        }
    }
}

/// Orthonormal signature rows via Gram-Schmidt over Gaussian draws.
fn orthonormal_signatures(n: usize, dim: usize, rng: &mut Rng) -> Result<Mat, DataError> {
    if n > dim {
        return Err(DataError::TooManyClasses {
            classes: n,
            feature_dim: dim,
        });
    }
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.normal_f32(1.0)).collect();
        for prev in &rows {
            let dot: f32 = v.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (x, &p) in v.iter_mut().zip(prev.iter()) {
                *x -= dot * p;
            }
        }
        let norm: f32 = crate::mat::scalar::sqrt(v.iter().map(|x| x * x).sum::<f32>());
        if norm < 1e-3 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    Ok(Mat::from_vec(n, dim, rows.into_iter().flatten().collect()))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DataError> {
    let mut rng = Rng::new(spec.seed);
    let signatures = orthonormal_signatures(spec.n_classes, spec.feature_dim, &mut rng)?;

    let mut videos = Vec::with_capacity(spec.n_videos);
    for id in 0..spec.n_videos {
        let mut vrng = rng.fork(id as u64);
        let len = vrng.range_usize(spec.frames_per_video.0, spec.frames_per_video.1);

        // Pick event lengths, either count-driven or coverage-driven.
        let lengths: Vec<usize> = match spec.background_fraction {
            None => {
                let count = vrng.range_usize(spec.events_per_video.0, spec.events_per_video.1);
                let mut picked: Vec<usize> = (0..count)
                    .map(|_| {
                        let bucket = spec.event_lengths[vrng.range_usize(0, spec.event_lengths.len() - 1)];
                        vrng.range_usize(bucket.0, bucket.1)
                    })
                    .collect();
                // Unlucky draws may overflow the video; shed the longest
                // events down to the minimum count before giving up.
                while picked.len() > spec.events_per_video.0
                    && picked.iter().sum::<usize>() + picked.len().saturating_sub(1) > len
                {
                    let longest = picked
                        .iter()
                        .enumerate()
                        .max_by_key(|(_, &l)| l)
                        .map(|(i, _)| i)
                        .unwrap();
                    picked.remove(longest);
                }
                picked
            }
            Some(bg) => {
                let target = ((1.0 - bg) * len as f64) as usize;
                let min_len = spec.event_lengths.iter().map(|b| b.0).min().unwrap_or(1);
                let mut picked = Vec::new();
                let mut covered = 0usize;
                while covered + min_len <= target && picked.len() < spec.events_per_video.1 {
                    // Feasible buckets leave the deficit reachable.
                    let deficit = target - covered;
                    let feasible: Vec<(usize, usize)> = spec
                        .event_lengths
                        .iter()
                        .filter(|b| b.0 <= deficit)
                        .map(|&(lo, hi)| (lo, hi.min(deficit)))
                        .collect();
                    if feasible.is_empty() {
                        break;
                    }
                    let bucket = feasible[vrng.range_usize(0, feasible.len() - 1)];
                    let l = vrng.range_usize(bucket.0, bucket.1);
                    covered += l;
                    picked.push(l);
                }
                picked
            }
        };

        let total_event_frames: usize = lengths.iter().sum();
        let min_gaps = lengths.len().saturating_sub(1);
        if total_event_frames + min_gaps > len {
            return Err(DataError::InfeasiblePacking {
                video: id,
                needed: total_event_frames + min_gaps,
                available: len,
            });
        }

        // Distribute the slack over gaps (before, between, after events).
        let slack = len - total_event_frames - min_gaps;
        let n_gaps = lengths.len() + 1;
        let mut gaps = vec![0usize; n_gaps];
        let mut remaining = slack;
        for (i, gap) in gaps.iter_mut().enumerate() {
            if i + 1 == n_gaps {
                *gap = remaining;
            } else {
                *gap = vrng.range_usize(0, remaining);
                remaining -= *gap;
            }
        }

        let mut gts = Vec::with_capacity(lengths.len());
        let mut cursor = gaps[0];
        for (i, &l) in lengths.iter().enumerate() {
            let class_id = vrng.range_usize(0, spec.n_classes - 1);
            gts.push(Segment {
                start: cursor as f64,
                end: (cursor + l - 1) as f64,
                class_id,
                score: None,
            });
            cursor += l;
            if i + 1 < lengths.len() {
                cursor += 1 + gaps[i + 1];
            }
        }

        // Raw rows: signature inside events, pure noise in background.
        let mut frames = Mat::zeros(len, spec.feature_dim);
        let labels = {
            let mut l = vec![None; len];
            for gt in &gts {
                for t in gt.start as usize..=gt.end as usize {
                    l[t] = Some(gt.class_id);
                }
            }
            l
        };
        for (t, label) in labels.iter().enumerate() {
            let row = frames.row_mut(t);
            if let Some(c) = label {
                row.copy_from_slice(signatures.row(*c));
            }
            for v in row.iter_mut() {
                *v += vrng.normal_f32(spec.noise_std as f32);
            }
        }
        videos.push(SourceVideo { id, frames, gts });
    }
    Ok(SyntheticDataset {
        videos,
        signatures,
        n_classes: spec.n_classes,
    })
}

/// Label word for synthetic class c.
pub fn class_label(c: usize) -> String {
    format!("act{c}")
}

/// Free-form caption for synthetic class c: the signature word wrapped in
/// shared filler so summary tokens must compete with distractors.
pub fn caption_for_class(c: usize) -> String {
    format!("the person starts to {} during the clip", class_label(c))
}

// ---------------------------------------------------------------------------
// Frame sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SamplingMode {
    /// Round(linspace) over the whole video.
    EvenlySpaced,
    /// A seeded window of consecutive frames, zero-padded on the right.
    ConsecutivePadded,
}

/// Frames remapped into model index space plus the matching ground truth.
#[derive(Clone, Debug)]
pub struct SampledClip {
    pub rows: Mat,
    pub mask: Vec<bool>,
    /// Ground truth in sampled-index coordinates (fractional).
    pub gts: Vec<Segment>,
    pub seconds_per_frame: f64,
    /// Sampled index -> source frame index, for mapping predictions back.
    pub source_scale: f64,
    pub source_offset: f64,
}

/// Sample `n` frames from a source video.
///
/// Evenly spaced sampling keeps ground truth exactly consistent: segment
/// endpoints are mapped through the continuous index transform (no
/// rounding), so a sampled cell's label is positive iff its source
/// timestamp falls inside the source segment.
pub fn sample_frames(
    video: &SourceVideo,
    mode: SamplingMode,
    n: usize,
    seconds_per_frame: f64,
    rng: &mut Rng,
) -> Result<SampledClip, DataError> {
    if n == 0 {
        return Err(DataError::BadSampleCount(n));
    }
    let len = video.frames.rows();
    if len == 0 {
        return Err(DataError::EmptyVideo);
    }
    match mode {
        SamplingMode::EvenlySpaced => {
            let scale = if n > 1 && len > 1 {
                (len - 1) as f64 / (n - 1) as f64
            } else {
                1.0
            };
            let mut rows = Mat::zeros(n, video.frames.cols());
            for i in 0..n {
                let src = libm::round(i as f64 * scale) as usize;
                rows.row_mut(i).copy_from_slice(video.frames.row(src.min(len - 1)));
            }
            let gts = video
                .gts
                .iter()
                .map(|g| Segment {
                    start: g.start / scale,
                    end: g.end / scale,
                    class_id: g.class_id,
                    score: None,
                })
                .collect();
            Ok(SampledClip {
                rows,
                mask: vec![true; n],
                gts,
                seconds_per_frame: seconds_per_frame * scale,
                source_scale: scale,
                source_offset: 0.0,
            })
        }
        SamplingMode::ConsecutivePadded => {
            let start = if len > n { rng.range_usize(0, len - n) } else { 0 };
            let valid = (len - start).min(n);
            let mut rows = Mat::zeros(n, video.frames.cols());
            for i in 0..valid {
                rows.row_mut(i).copy_from_slice(video.frames.row(start + i));
            }
            let mut mask = vec![false; n];
            for m in mask.iter_mut().take(valid) {
                *m = true;
            }
            let horizon = (valid - 1) as f64;
            let gts = video
                .gts
                .iter()
                .filter_map(|g| {
                    let s = g.start - start as f64;
                    let e = g.end - start as f64;
                    if e < 0.0 || s > horizon {
                        return None;
                    }
                    Some(Segment {
                        start: s.max(0.0),
                        end: e.min(horizon),
                        class_id: g.class_id,
                        score: None,
                    })
                })
                .collect();
            Ok(SampledClip {
                rows,
                mask,
                gts,
                seconds_per_frame,
                source_scale: 1.0,
                source_offset: start as f64,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Annotation records (the JSON schema lives in the companion crate)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotatedSegment {
    pub start_sec: f64,
    pub end_sec: f64,
    /// Class label (TAL/AS) or free-form caption (MR).
    pub text: String,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VideoAnnotation {
    pub id: String,
    pub duration_sec: f64,
    pub fps: f64,
    pub segments: Vec<AnnotatedSegment>,
}

#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotationSet {
    pub task: Task,
    pub classes: Vec<String>,
    pub videos: Vec<VideoAnnotation>,
}

impl AnnotationSet {
    /// Segments inside [0, duration], labels drawn from the class list for
    /// closed-vocabulary tasks; videos come back ordered by id.
    pub fn validate(&self) -> Result<(), DataError> {
        for video in &self.videos {
            for (i, seg) in video.segments.iter().enumerate() {
                if !(seg.start_sec >= 0.0) || seg.start_sec > seg.end_sec {
                    return Err(DataError::AnnotationOutOfBounds {
                        video: video.id.clone(),
                        record: i,
                        field: "start_sec",
                    });
                }
                if seg.end_sec > video.duration_sec {
                    return Err(DataError::AnnotationOutOfBounds {
                        video: video.id.clone(),
                        record: i,
                        field: "end_sec",
                    });
                }
                if self.task != Task::Mr && !self.classes.iter().any(|c| c == &seg.text) {
                    return Err(DataError::UnknownLabel {
                        video: video.id.clone(),
                        record: i,
                        label: seg.text.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn sort_videos(&mut self) {
        self.videos.sort_by(|a, b| a.id.cmp(&b.id));
    }
}

/// Export a synthetic dataset as annotation records (at the given fps).
pub fn to_annotations(dataset: &SyntheticDataset, task: Task, fps: f64) -> AnnotationSet {
    let classes: Vec<String> = (0..dataset.n_classes).map(class_label).collect();
    let videos = dataset
        .videos
        .iter()
        .map(|v| VideoAnnotation {
            id: format!("video{:05}", v.id),
            duration_sec: v.frames.rows() as f64 / fps,
            fps,
            segments: v
                .gts
                .iter()
                .map(|g| AnnotatedSegment {
                    start_sec: g.start / fps,
                    end_sec: g.end / fps,
                    text: if task == Task::Mr {
                        caption_for_class(g.class_id)
                    } else {
                        class_label(g.class_id)
                    },
                })
                .collect(),
        })
        .collect();
    AnnotationSet {
        task,
        classes,
        videos,
    }
}
