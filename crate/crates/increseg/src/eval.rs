//! Confusion-matrix evaluation: per-class IoU and grouped mIoU reported in
//! base / novel / all columns.

use crate::error::{Error, Result};
use crate::types::{HardLabelMap, TaskSchedule, IGNORE};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Pixel counts indexed `[ground_truth][prediction]`; IGNORE pixels excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { counts: Array2::zeros((num_classes, num_classes)) }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.dim().0
    }

    /// Adds per-pixel (gt, pred) counts from one image pair.
    pub fn accumulate(&mut self, gt: &HardLabelMap, pred: &HardLabelMap) -> Result<()> {
        if gt.labels.dim() != pred.labels.dim() {
            return Err(Error::validation("confusion accumulate: shape mismatch"));
        }
        let c = self.num_classes() as i32;
        for (&g, &p) in gt.labels.iter().zip(pred.labels.iter()) {
            if g == IGNORE {
                continue;
            }
            if g < 0 || g >= c || p < 0 || p >= c {
                return Err(Error::validation(format!(
                    "confusion accumulate: label pair ({g}, {p}) out of range for {c} classes"
                )));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Associative merge, so per-image matrices can be reduced in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.counts.dim() != other.counts.dim() {
            return Err(Error::validation("confusion merge: class count mismatch"));
        }
        self.counts += &other.counts;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU of one class, or `None` when its union is zero.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[[class, class]];
        let row: u64 = self.counts.row(class).iter().sum();
        let col: u64 = self.counts.column(class).iter().sum();
        let union = row + col - tp;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }
}

/// Mean IoU over `group`, skipping (and reporting) classes with zero union.
pub struct GroupMiou {
    pub value: f64,
    pub skipped: Vec<usize>,
}

pub fn miou(cm: &ConfusionMatrix, group: &[usize]) -> Result<GroupMiou> {
    if group.is_empty() {
        return Err(Error::validation("miou: empty class group"));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = Vec::new();
    for &class in group {
        if class >= cm.num_classes() {
            return Err(Error::validation(format!("miou: class {class} out of range")));
        }
        match cm.class_iou(class) {
            Some(v) => {
                sum += v;
                counted += 1;
            }
            None => skipped.push(class),
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "every class in the group has zero union".into(),
        ));
    }
    Ok(GroupMiou { value: sum / counted as f64, skipped })
}

/// Class-index groups for the standard three-column report at task `t`.
///
/// Base covers task 1's classes, novel covers everything learned after, and
/// "all" optionally includes background (index 0).
pub fn report_groups(
    schedule: &TaskSchedule,
    t: usize,
    include_background_in_all: bool,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (b0, b1) = schedule.task_index_range(1)?;
    let base: Vec<usize> = (b0..b1).collect();
    let acc_len = crate::types::accumulated_classes(schedule, t)?.len();
    let novel: Vec<usize> = (b1..acc_len).collect();
    let all: Vec<usize> =
        if include_background_in_all { (0..acc_len).collect() } else { (1..acc_len).collect() };
    Ok((base, novel, all))
}

/// One task's evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub base_miou: Option<f64>,
    pub novel_miou: Option<f64>,
    pub all_miou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl TaskMetrics {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        schedule: &TaskSchedule,
        t: usize,
        include_background_in_all: bool,
    ) -> Result<Self> {
        let (base, novel, all) = report_groups(schedule, t, include_background_in_all)?;
        let base_miou = if base.is_empty() { None } else { Some(miou(cm, &base)?.value) };
        let novel_miou = if novel.is_empty() { None } else { miou(cm, &novel).ok().map(|m| m.value) };
        let all_miou = miou(cm, &all)?.value;
        let per_class = (0..cm.num_classes()).map(|c| cm.class_iou(c)).collect();
        Ok(Self { task: t, base_miou, novel_miou, all_miou, per_class })
    }
}

/// Aligned text table over per-task metrics, mirroring the base/novel/all
/// column layout of the standard benchmark tables.
pub fn format_report(rows: &[TaskMetrics], schedule: &TaskSchedule) -> String {
    let base_n = schedule.task_classes(1).map(|c| c.len()).unwrap_or(0);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:>12} {:>12} {:>8}\n",
        "task",
        format!("base(1-{base_n})"),
        "novel",
        "all"
    ));
    for row in rows {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{:.4}", x),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<6} {:>12} {:>12} {:>8.4}\n",
            row.task,
            fmt(row.base_miou),
            fmt(row.novel_miou),
            row.all_miou
        ));
    }
    out
}
