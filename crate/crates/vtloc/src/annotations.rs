//! Annotation JSON: one schema for all three tasks.
//!
//! ```json
//! {
//!   "task": "mr|tal|as",
//!   "classes": ["act0", ...],
//!   "videos": [
//!     {"id": "...", "duration_sec": 64.0, "fps": 2.0,
//!      "segments": [{"start_sec": 1.0, "end_sec": 4.5, "label": "act0"}]}
//!   ]
//! }
//! ```
//!
//! MR segments carry `caption` instead of `label`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vtloc_core::config::Task;
use vtloc_core::data::{AnnotatedSegment, AnnotationSet, VideoAnnotation};

use crate::FormatError;

#[derive(Serialize, Deserialize)]
struct FileRoot {
    task: String,
    #[serde(default)]
    classes: Vec<String>,
    videos: Vec<FileVideo>,
}

#[derive(Serialize, Deserialize)]
struct FileVideo {
    id: String,
    duration_sec: f64,
    fps: f64,
    segments: Vec<FileSegment>,
}

#[derive(Serialize, Deserialize)]
struct FileSegment {
    start_sec: f64,
    end_sec: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Mr => "mr",
        Task::Tal => "tal",
        Task::As => "as",
    }
}

fn parse_task(name: &str) -> Result<Task, FormatError> {
    match name {
        "mr" => Ok(Task::Mr),
        "tal" => Ok(Task::Tal),
        "as" => Ok(Task::As),
        other => Err(FormatError::Invalid(format!(
            "field task: expected mr|tal|as, got {other:?}"
        ))),
    }
}

/// Parse, validate and order an annotation file. Every failure names the
/// offending video and record.
pub fn read_annotations(path: &Path) -> Result<AnnotationSet, FormatError> {
    let text = fs::read_to_string(path)?;
    let root: FileRoot = serde_json::from_str(&text)?;
    let task = parse_task(&root.task)?;
    let videos = root
        .videos
        .into_iter()
        .map(|v| {
            let segments = v
                .segments
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let text = match (task, s.label, s.caption) {
                        (Task::Mr, _, Some(c)) => c,
                        (Task::Mr, _, None) => {
                            return Err(FormatError::Invalid(format!(
                                "video {:?} segment {i}: missing field caption",
                                v.id
                            )))
                        }
                        (_, Some(l), _) => l,
                        (_, None, _) => {
                            return Err(FormatError::Invalid(format!(
                                "video {:?} segment {i}: missing field label",
                                v.id
                            )))
                        }
                    };
                    Ok(AnnotatedSegment {
                        start_sec: s.start_sec,
                        end_sec: s.end_sec,
                        text,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(VideoAnnotation {
                id: v.id,
                duration_sec: v.duration_sec,
                fps: v.fps,
                segments,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let mut set = AnnotationSet {
        task,
        classes: root.classes,
        videos,
    };
    set.validate()
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    set.sort_videos();
    Ok(set)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<(), FormatError> {
    let root = FileRoot {
        task: task_name(set.task).to_string(),
        classes: set.classes.clone(),
        videos: set
            .videos
            .iter()
            .map(|v| FileVideo {
                id: v.id.clone(),
                duration_sec: v.duration_sec,
                fps: v.fps,
                segments: v
                    .segments
                    .iter()
                    .map(|s| FileSegment {
                        start_sec: s.start_sec,
                        end_sec: s.end_sec,
                        label: (set.task != Task::Mr).then(|| s.text.clone()),
                        caption: (set.task == Task::Mr).then(|| s.text.clone()),
                    })
                    .collect(),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&root)?)?;
    Ok(())
}
