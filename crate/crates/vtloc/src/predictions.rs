//! Prediction dumps: JSON lines, one candidate per line, in seconds.

use std::io::Write;
use std::path::Path;

use serde_json::json;
use vtloc_core::config::Task;
use vtloc_core::pipeline::VideoPredictions;

use crate::FormatError;

/// One line per candidate:
/// `{"video_id": ..., "class_id"| "caption_id": ..., "start_sec": ...,
///   "end_sec": ..., "score": ...}`.
pub fn write_jsonl(
    path: &Path,
    task: Task,
    predictions: &[VideoPredictions],
    video_ids: &[String],
) -> Result<(), FormatError> {
    let mut file = std::fs::File::create(path)?;
    let id_key = if task == Task::Mr { "caption_id" } else { "class_id" };
    for video in predictions {
        let name = video_ids
            .get(video.video_id)
            .cloned()
            .unwrap_or_else(|| format!("video{:05}", video.video_id));
        for cand in &video.candidates.items {
            let to_sec = |sampled: f64| {
                (video.source_offset + sampled * video.source_scale) * video.seconds_per_frame
            };
            let line = json!({
                "video_id": name,
                id_key: cand.segment.class_id,
                "start_sec": to_sec(cand.segment.start),
                "end_sec": to_sec(cand.segment.end),
                "score": cand.segment.score.unwrap_or(0.0),
            });
            writeln!(file, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vtloc_core::decode::{Candidate, CandidateSet};
    use vtloc_core::geom::Segment;

    #[test]
    fn lines_carry_seconds_and_the_task_key() {
        let preds = vec![VideoPredictions {
            video_id: 0,
            candidates: CandidateSet {
                items: vec![Candidate {
                    segment: Segment {
                        start: 4.0,
                        end: 10.0,
                        class_id: 1,
                        score: Some(0.75),
                    },
                    level: 0,
                    cell: 4,
                }],
            },
            source_scale: 2.0,
            source_offset: 0.0,
            seconds_per_frame: 0.5,
        }];
        let dir = std::env::temp_dir().join("vtloc-pred-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("preds.jsonl");
        write_jsonl(&path, Task::Tal, &preds, &["clip-a".to_string()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(line["video_id"], "clip-a");
        assert_eq!(line["class_id"], 1);
        // 4 sampled frames * scale 2 * 0.5 sec per source frame.
        assert_eq!(line["start_sec"], 4.0);
        assert_eq!(line["end_sec"], 10.0);
        std::fs::remove_file(&path).unwrap();

        let path2 = dir.join("preds-mr.jsonl");
        write_jsonl(&path2, Task::Mr, &preds, &["clip-a".to_string()]).unwrap();
        let text = std::fs::read_to_string(&path2).unwrap();
        assert!(text.contains("caption_id"));
        std::fs::remove_file(&path2).unwrap();
    }
}
