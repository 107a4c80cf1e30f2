//! Task evaluation and result emission (JSON Lines and CSV).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use peftsam_core::interactive::{evaluate_ais, evaluate_interactive, ObjectRecord, SegModel};
use peftsam_core::synth::{Metric, Sample, Task};
use peftsam_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::EvalTask;

pub const CSV_COLUMNS: [&str; 7] = ["experiment", "method", "seed", "task", "value", "params_trainable", "act_bytes"];

/// Run-level context echoed into every record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordMeta {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub params_trainable: u64,
    pub act_bytes: u64,
    pub epochs_run: usize,
    pub stop_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    pub task: EvalTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_iteration: Option<Vec<f64>>,
    pub params_trainable: u64,
    pub act_bytes: u64,
    pub epochs_run: usize,
    pub stop_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JsonlLine<'a> {
    Result(&'a ResultRecord),
    Object(&'a ObjectRecord),
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutput {
    /// One record per (image, task).
    pub per_image: Vec<ResultRecord>,
    /// One record per (image, object, start kind) for interactive tasks.
    pub objects: Vec<ObjectRecord>,
    /// One aggregate record per task.
    pub summary: Vec<ResultRecord>,
}

impl EvalOutput {
    pub fn value(&self, task: EvalTask) -> Option<f64> {
        self.summary.iter().find(|r| r.task == task).map(|r| r.value)
    }

    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.per_image {
            out.push_str(&serde_json::to_string(&JsonlLine::Result(r)).expect("records serialize"));
            out.push('\n');
        }
        for r in &self.objects {
            out.push_str(&serde_json::to_string(&JsonlLine::Object(r)).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn csv(&self) -> String {
        csv_table(&self.summary)
    }
}

pub fn csv_header(extra: &[&str]) -> String {
    let mut cols: Vec<&str> = CSV_COLUMNS.to_vec();
    cols.extend_from_slice(extra);
    cols.join(",") + "\n"
}

/// The fixed columns of one record, without a line terminator.
pub fn csv_row(r: &ResultRecord) -> String {
    format!(
        "{},{},{},{},{:.6},{},{}",
        csv_field(&r.experiment),
        csv_field(&r.method),
        r.seed,
        r.task,
        r.value,
        r.params_trainable,
        r.act_bytes
    )
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_table(rows: &[ResultRecord]) -> String {
    let mut out = csv_header(&[]);
    for r in rows {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn check_tasks(tasks: &[EvalTask], task_flag: Task) -> Result<()> {
    if tasks.contains(&EvalTask::Ais) && task_flag != Task::Instance {
        return Err(Error::Config("ais needs an instance-segmentation dataset".into()));
    }
    Ok(())
}

fn record(meta: &RecordMeta, task: EvalTask, image_id: Option<String>, value: f64, per_iteration: Option<Vec<f64>>) -> ResultRecord {
    ResultRecord {
        experiment: meta.experiment.clone(),
        method: meta.method.clone(),
        seed: meta.seed,
        task,
        image_id,
        value,
        per_iteration,
        params_trainable: meta.params_trainable,
        act_bytes: meta.act_bytes,
        epochs_run: meta.epochs_run,
        stop_reason: meta.stop_reason.clone(),
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates `tasks` on `data`. Interactive tasks with the same start kind
/// share one protocol run.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<M: SegModel>(
    model: &M,
    data: &[Sample],
    task_flag: Task,
    metric: Metric,
    tasks: &[EvalTask],
    corrections: usize,
    seed: u64,
    meta: &RecordMeta,
) -> Result<EvalOutput> {
    check_tasks(tasks, task_flag)?;
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut out = EvalOutput::default();
    let mut runs = BTreeMap::new();
    for &task in tasks {
        if let Some(start) = task.start() {
            if let std::collections::btree_map::Entry::Vacant(e) = runs.entry(start) {
                let r = evaluate_interactive(model, data, start, corrections, metric, seed, false)?;
                out.objects.extend(r.records.iter().cloned());
                e.insert(r);
            }
        }
    }
    for &task in tasks {
        match task.start() {
            None => {
                let scores = evaluate_ais(model, data)?;
                for (s, v) in data.iter().zip(&scores) {
                    out.per_image.push(record(meta, task, Some(s.id.clone()), *v, None));
                }
                out.summary.push(record(meta, task, None, mean(scores), None));
            }
            Some(start) => {
                let run = &runs[&start];
                let pick = |m: &[f64]| if task.is_final() { *m.last().unwrap() } else { m[0] };
                for s in data {
                    let objs: Vec<&ObjectRecord> = run.records.iter().filter(|r| r.image_id == s.id).collect();
                    let curve = (0..=corrections)
                        .map(|k| mean(objs.iter().map(|r| r.metrics[k])))
                        .collect();
                    out.per_image
                        .push(record(meta, task, Some(s.id.clone()), mean(objs.iter().map(|r| pick(&r.metrics))), Some(curve)));
                }
                let value = if task.is_final() { run.last } else { run.initial };
                let curve = (0..=corrections)
                    .map(|k| mean(run.records.iter().map(|r| r.metrics[k])))
                    .collect();
                out.summary.push(record(meta, task, None, value, Some(curve)));
            }
        }
    }
    Ok(out)
}
