//! Dataset directories: `annotations.json` plus one `features/<id>.ulft`
//! per video, bridged into core task samples.

use std::path::Path;

use vtloc_core::config::Task;
use vtloc_core::data::{AnnotationSet, PromptSet, SourceVideo, SyntheticDataset, Vocab};
use vtloc_core::encoders::FrameTokens;
use vtloc_core::geom::Segment;
use vtloc_core::mat::Mat;
use vtloc_core::pipeline::{TaskSample, TextContext};

use crate::annotations::{read_annotations, write_annotations};
use crate::features::{read_features, write_features};
use crate::FormatError;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug)]
pub struct LoadedDataset {
    pub task: Task,
    pub samples: Vec<TaskSample>,
    pub ctx: TextContext,
    /// Sample video index -> annotation id string.
    pub video_ids: Vec<String>,
    pub annotations: AnnotationSet,
}

impl LoadedDataset {
    /// Re-encode every sample's texts through another context (e.g. a
    /// checkpoint's vocabulary and prompt templates), so token ids match
    /// the model that will consume them.
    pub fn re_encode_texts(&mut self, ctx: &TextContext) {
        for (sample, ann) in self.samples.iter_mut().zip(self.annotations.videos.iter()) {
            sample.texts = match self.task {
                Task::Mr => {
                    let mut captions: Vec<&str> = Vec::new();
                    for s in &ann.segments {
                        if !captions.contains(&s.text.as_str()) {
                            captions.push(&s.text);
                        }
                    }
                    captions.iter().map(|c| ctx.vocab.encode(c)).collect()
                }
                _ => (0..ctx.class_labels.len()).map(|c| ctx.label_ids(c)).collect(),
            };
        }
    }
}

/// Write a synthetic dataset as a directory the CLI can train from.
pub fn write_synthetic(
    dir: &Path,
    dataset: &SyntheticDataset,
    task: Task,
    fps: f64,
) -> Result<(), FormatError> {
    std::fs::create_dir_all(dir.join(FEATURES_DIR))?;
    let set = vtloc_core::data::to_annotations(dataset, task, fps);
    write_annotations(&dir.join(ANNOTATIONS_FILE), &set)?;
    for (video, ann) in dataset.videos.iter().zip(set.videos.iter()) {
        let mask = vec![true; video.frames.rows()];
        let tokens = FrameTokens::new(video.frames.clone(), mask)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        write_features(
            &dir.join(FEATURES_DIR).join(format!("{}.ulft", ann.id)),
            &tokens,
        )?;
    }
    Ok(())
}

/// Build the text context from an annotation set: prompts, class labels
/// and a vocabulary over every word the dataset can produce.
pub fn context_from_annotations(set: &AnnotationSet) -> TextContext {
    let prompts = PromptSet::kinetics_style();
    let mut corpus: Vec<String> = Vec::new();
    for t in prompts.templates() {
        corpus.push(t.replace(vtloc_core::data::LABEL_SLOT, ""));
    }
    corpus.extend(set.classes.iter().cloned());
    for v in &set.videos {
        for s in &v.segments {
            corpus.push(s.text.clone());
        }
    }
    TextContext {
        vocab: Vocab::build(corpus.iter().map(String::as_str)),
        prompts,
        class_labels: set.classes.clone(),
    }
}

/// Load a dataset directory into task samples.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, FormatError> {
    let set = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let ctx = context_from_annotations(&set);
    let task = set.task;

    let mut samples = Vec::with_capacity(set.videos.len());
    let mut video_ids = Vec::with_capacity(set.videos.len());
    let mut width: Option<usize> = None;
    for (index, ann) in set.videos.iter().enumerate() {
        let path = dir.join(FEATURES_DIR).join(format!("{}.ulft", ann.id));
        let tokens = read_features(&path)?;
        // Only trailing padding makes sense for stored features; keep the
        // valid prefix.
        let valid = tokens.mask.iter().take_while(|&&m| m).count();
        if tokens.mask[..valid].iter().any(|&m| !m) || tokens.mask[valid..].iter().any(|&m| m) {
            return Err(FormatError::Invalid(format!(
                "{}: interior padding in feature mask",
                path.display()
            )));
        }
        let frames = tokens.tokens.slice_rows(0, valid);
        match width {
            None => width = Some(frames.cols()),
            Some(w) if w == frames.cols() => {}
            Some(w) => {
                return Err(FormatError::Invalid(format!(
                    "{}: feature width {} differs from {}",
                    path.display(),
                    frames.cols(),
                    w
                )))
            }
        }

        // MR: one query per distinct caption, so segments sharing a caption
        // form a multi-moment query. TAL/AS index into the class list.
        let mut captions: Vec<String> = Vec::new();
        let gts: Vec<Segment> = ann
            .segments
            .iter()
            .map(|s| {
                let class_id = match task {
                    Task::Mr => match captions.iter().position(|c| c == &s.text) {
                        Some(i) => i,
                        None => {
                            captions.push(s.text.clone());
                            captions.len() - 1
                        }
                    },
                    _ => set
                        .classes
                        .iter()
                        .position(|c| c == &s.text)
                        .expect("validated against class list"),
                };
                Segment {
                    start: s.start_sec * ann.fps,
                    end: s.end_sec * ann.fps,
                    class_id,
                    score: None,
                }
            })
            .collect();

        let texts: Vec<Vec<u32>> = match task {
            Task::Mr => captions.iter().map(|c| ctx.vocab.encode(c)).collect(),
            _ => (0..set.classes.len()).map(|c| ctx.label_ids(c)).collect(),
        };

        samples.push(TaskSample {
            video_id: index,
            video: SourceVideo {
                id: index,
                frames,
                gts,
            },
            texts,
            task,
            seconds_per_frame: 1.0 / ann.fps,
        });
        video_ids.push(ann.id.clone());
    }
    Ok(LoadedDataset {
        task,
        samples,
        ctx,
        video_ids,
        annotations: set,
    })
}

/// Feature rows re-exported for inspection or external tooling.
pub fn export_features(sample: &TaskSample, path: &Path) -> Result<(), FormatError> {
    let mask = vec![true; sample.video.frames.rows()];
    let tokens = FrameTokens::new(sample.video.frames.clone(), mask)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    write_features(path, &tokens)
}

/// True when the matrix carries no NaN/inf, used by ingest validation.
pub fn all_finite(m: &Mat) -> bool {
    m.as_slice().iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vtloc_core::data::{generate_synthetic, SyntheticSpec};

    #[test]
    fn synthetic_write_load_round_trip() {
        let spec = SyntheticSpec {
            n_videos: 3,
            n_classes: 2,
            frames_per_video: (32, 40),
            events_per_video: (1, 2),
            event_lengths: vec![(3, 6)],
            feature_dim: 8,
            noise_std: 0.1,
            background_fraction: None,
            seed: 11,
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = std::env::temp_dir().join("vtloc-ds-test");
        let _ = std::fs::remove_dir_all(&dir);
        write_synthetic(&dir, &data, Task::Tal, 2.0).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.samples.len(), 3);
        assert_eq!(loaded.task, Task::Tal);
        for (sample, video) in loaded.samples.iter().zip(data.videos.iter()) {
            assert_eq!(sample.video.frames, video.frames);
            assert_eq!(sample.video.gts.len(), video.gts.len());
            for (a, b) in sample.video.gts.iter().zip(video.gts.iter()) {
                // Seconds -> frames round trip through fps 2.
                assert!((a.start - b.start).abs() < 1e-9);
                assert!((a.end - b.end).abs() < 1e-9);
                assert_eq!(a.class_id, b.class_id);
            }
            assert_eq!(sample.texts.len(), 2);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn ann_caption(dir: &std::path::Path, video_id: &str, segment: usize) -> String {
        let set = read_annotations(&dir.join(ANNOTATIONS_FILE)).unwrap();
        let v = set.videos.iter().find(|v| v.id == video_id).unwrap();
        v.segments[segment].text.clone()
    }

    #[test]
    fn mr_round_trip_uses_caption_indices() {
        let spec = SyntheticSpec {
            n_videos: 2,
            n_classes: 2,
            frames_per_video: (32, 32),
            events_per_video: (2, 2),
            event_lengths: vec![(3, 6)],
            feature_dim: 8,
            noise_std: 0.1,
            background_fraction: None,
            seed: 12,
        };
        let data = generate_synthetic(&spec).unwrap();
        let dir = std::env::temp_dir().join("vtloc-ds-mr-test");
        let _ = std::fs::remove_dir_all(&dir);
        write_synthetic(&dir, &data, Task::Mr, 2.0).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        for sample in &loaded.samples {
            // One text per distinct caption; every moment points at one.
            assert!(!sample.texts.is_empty());
            assert!(sample.texts.len() <= sample.video.gts.len());
            for g in &sample.video.gts {
                assert!(g.class_id < sample.texts.len());
            }
            // Same-caption moments share a query id.
            let mut seen = std::collections::BTreeMap::new();
            for (i, g) in sample.video.gts.iter().enumerate() {
                let caption = &ann_caption(&dir, &loaded.video_ids[sample.video_id], i);
                if let Some(&prev) = seen.get(caption) {
                    assert_eq!(g.class_id, prev);
                } else {
                    seen.insert(caption.clone(), g.class_id);
                }
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
