//! Evaluation reports as JSON with fixed metric key names.

use std::path::Path;

use serde_json::{json, Map, Value};
use vtloc_core::config::Task;
use vtloc_core::metrics::EvalReport;

use crate::FormatError;

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Mr => "mr",
        Task::Tal => "tal",
        Task::As => "as",
    }
}

/// `{"task": ..., "metrics": {name: value}, "per_class_ap": [...]}` with
/// deterministic (sorted) keys.
pub fn to_json(report: &EvalReport) -> Value {
    let mut metrics = Map::new();
    for (name, value) in &report.metrics {
        metrics.insert(name.clone(), json!(value));
    }
    let per_class: Vec<Value> = report
        .per_class_ap
        .iter()
        .map(|(class, ap)| json!({"class": class, "ap": ap}))
        .collect();
    json!({
        "task": task_name(report.task),
        "metrics": metrics,
        "per_class_ap": per_class,
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(&to_json(report))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Value, FormatError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_uses_fixed_metric_keys() {
        let report = EvalReport {
            task: Task::Tal,
            metrics: vec![("mAP@0.5".to_string(), 0.5)],
            per_class_ap: vec![(0, 0.25), (2, 0.75)],
        };
        let value = to_json(&report);
        assert_eq!(value["task"], "tal");
        assert_eq!(value["metrics"]["mAP@0.5"], 0.5);
        assert_eq!(value["per_class_ap"][1]["class"], 2);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let report = EvalReport {
            task: Task::Mr,
            metrics: vec![
                ("recall@1@0.5".to_string(), 0.8),
                ("recall@1@0.7".to_string(), 0.6),
            ],
            per_class_ap: vec![],
        };
        let a = serde_json::to_string(&to_json(&report)).unwrap();
        let b = serde_json::to_string(&to_json(&report)).unwrap();
        assert_eq!(a, b);
    }
}
