//! Core data model: images, dense label maps, class bookkeeping, task schedules.
//!
//! Everything here is an immutable value object after construction; operations
//! are pure functions, so the types are safe to share across threads.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Label value for pixels no source labels (stored as 255 in 8-bit mask files).
pub const IGNORE: i32 = -1;

/// An RGB image with pixel values in `[0, 1]`, shape `(3, H, W)`.
#[derive(Debug, Clone)]
pub struct Image {
    pub pixels: Array3<f64>,
    pub id: String,
}

impl Image {
    pub fn new(pixels: Array3<f64>, id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::validation(format!("image must have 3 channels, got {c}")));
        }
        if h < 1 || w < 1 {
            return Err(Error::validation("image must be at least 1x1"));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation("image pixels must be finite and within [0, 1]"));
        }
        Ok(Self { pixels, id: id.into() })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Interpretation of the values in a [`LabelMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapKind {
    Logits,
    Probabilities,
}

/// Dense per-pixel class scores, shape `(C, H, W)`.
///
/// Holds either raw logits or probabilities depending on [`MapKind`].
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub scores: Array3<f64>,
    pub kind: MapKind,
}

impl LabelMap {
    pub fn new(scores: Array3<f64>, kind: MapKind) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("label map contains non-finite scores"));
        }
        if kind == MapKind::Probabilities
            && scores.iter().any(|v| *v < 0.0 || *v > 1.0)
        {
            return Err(Error::validation("probability map has entries outside [0, 1]"));
        }
        Ok(Self { scores, kind })
    }

    pub fn logits(scores: Array3<f64>) -> Result<Self> {
        Self::new(scores, MapKind::Logits)
    }

    pub fn probabilities(scores: Array3<f64>) -> Result<Self> {
        Self::new(scores, MapKind::Probabilities)
    }

    pub fn num_classes(&self) -> usize {
        self.scores.dim().0
    }

    pub fn height(&self) -> usize {
        self.scores.dim().1
    }

    pub fn width(&self) -> usize {
        self.scores.dim().2
    }
}

/// Per-pixel class index map, shape `(H, W)`. Entries are class indices into
/// the accumulated class set (background is index 0) or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardLabelMap {
    pub labels: Array2<i32>,
}

impl HardLabelMap {
    pub fn new(labels: Array2<i32>) -> Self {
        Self { labels }
    }

    /// Validates every non-IGNORE entry against the class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &v in self.labels.iter() {
            if v != IGNORE && (v < 0 || v as usize >= num_classes) {
                return Err(Error::validation(format!(
                    "hard label {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    /// Distinct non-background, non-IGNORE class indices, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for &v in self.labels.iter() {
            if v > 0 {
                set.insert(v as usize);
            }
        }
        set.into_iter().collect()
    }
}

/// Image-level multi-label: the set of class names known to appear in an image.
///
/// Background is implicit and never listed. For ordinary dataset samples the
/// set is a subset of the current task's classes; augmentation may union in
/// a previously learned class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLevelLabels {
    classes: BTreeSet<String>,
}

impl ImageLevelLabels {
    pub fn new(classes: impl IntoIterator<Item = String>) -> Result<Self> {
        let classes: BTreeSet<String> = classes.into_iter().collect();
        if classes.is_empty() {
            return Err(Error::validation(
                "every training sample must carry at least one image-level class",
            ));
        }
        Ok(Self { classes })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.classes.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|s| s.as_str())
    }

    pub fn with_class(&self, name: &str) -> Self {
        let mut classes = self.classes.clone();
        classes.insert(name.to_string());
        Self { classes }
    }

    /// Boolean presence vector over the given class-name slice.
    pub fn to_mask(&self, class_names: &[String]) -> Vec<bool> {
        class_names.iter().map(|n| self.classes.contains(n)).collect()
    }
}

/// Ordered class partitions across tasks. Background is not a member of any
/// partition; it always occupies index 0 of every accumulated set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    partitions: Vec<Vec<String>>,
    background_name: String,
}

impl TaskSchedule {
    pub fn new(partitions: Vec<Vec<String>>, background_name: impl Into<String>) -> Result<Self> {
        let background_name = background_name.into();
        let mut seen = BTreeSet::new();
        for part in &partitions {
            if part.is_empty() {
                return Err(Error::validation("schedule partition must not be empty"));
            }
            for name in part {
                if name == &background_name {
                    return Err(Error::validation("background must not appear in a partition"));
                }
                if !seen.insert(name.clone()) {
                    return Err(Error::validation(format!("duplicate class name '{name}'")));
                }
            }
        }
        Ok(Self { partitions, background_name })
    }

    pub fn num_tasks(&self) -> usize {
        self.partitions.len()
    }

    pub fn background_name(&self) -> &str {
        &self.background_name
    }

    /// Classes introduced at task `t` (1-based).
    pub fn task_classes(&self, t: usize) -> Result<&[String]> {
        self.check_task(t)?;
        Ok(&self.partitions[t - 1])
    }

    /// All non-background class names in schedule order.
    pub fn all_classes(&self) -> Vec<String> {
        self.partitions.iter().flatten().cloned().collect()
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.partitions.len() {
            return Err(Error::range(format!(
                "task index {t} out of range 1..={}",
                self.partitions.len()
            )));
        }
        Ok(())
    }

    /// Index range (inclusive start, exclusive end) of task `t`'s classes in
    /// the accumulated ordering.
    pub fn task_index_range(&self, t: usize) -> Result<(usize, usize)> {
        self.check_task(t)?;
        let start = 1 + self.partitions[..t - 1].iter().map(|p| p.len()).sum::<usize>();
        Ok((start, start + self.partitions[t - 1].len()))
    }
}

/// Background followed by all classes of tasks `1..=t`, in schedule order.
///
/// The ordering is stable: `accumulated_classes(t)` is always a prefix of
/// `accumulated_classes(t + 1)`, so a class index never changes across tasks.
pub fn accumulated_classes(schedule: &TaskSchedule, t: usize) -> Result<Vec<String>> {
    schedule.check_task(t)?;
    let mut out = Vec::with_capacity(1 + schedule.partitions[..t].iter().map(|p| p.len()).sum::<usize>());
    out.push(schedule.background_name.clone());
    for part in &schedule.partitions[..t] {
        out.extend(part.iter().cloned());
    }
    Ok(out)
}

/// Index of `name` in the accumulated ordering at task `t`.
pub fn class_index(schedule: &TaskSchedule, t: usize, name: &str) -> Result<usize> {
    let acc = accumulated_classes(schedule, t)?;
    acc.iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::validation(format!("class '{name}' not in accumulated set at task {t}")))
}

/// A training sample: image plus image-level labels. The hidden full mask is
/// consulted only by the synthetic oracle and final evaluation; the trainer
/// never reads it.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    pub weak_labels: ImageLevelLabels,
    pub hidden_mask: Option<HardLabelMap>,
}

impl TrainSample {
    pub fn new(
        image: Image,
        weak_labels: ImageLevelLabels,
        hidden_mask: Option<HardLabelMap>,
    ) -> Result<Self> {
        if let Some(mask) = &hidden_mask {
            if mask.height() != image.height() || mask.width() != image.width() {
                return Err(Error::validation(format!(
                    "hidden mask {}x{} does not match image {}x{}",
                    mask.height(),
                    mask.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        Ok(Self { image, weak_labels, hidden_mask })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }
}

/// Per-pixel argmax of a probability map. Ties break toward the lowest class
/// index so golden tests stay deterministic.
pub fn harden(soft: &LabelMap) -> Result<HardLabelMap> {
    if soft.kind != MapKind::Probabilities {
        return Err(Error::validation("harden expects a probability map"));
    }
    let (c, h, w) = soft.scores.dim();
    if c == 0 {
        return Err(Error::validation("harden needs at least one class"));
    }
    let mut labels = Array2::<i32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_score = soft.scores[[0, y, x]];
            for k in 1..c {
                let s = soft.scores[[k, y, x]];
                if s > best_score {
                    best_score = s;
                    best = k;
                }
            }
            labels[[y, x]] = best as i32;
        }
    }
    Ok(HardLabelMap::new(labels))
}

/// One-hot re-encoding of a hard map over `num_classes` channels. IGNORE
/// pixels encode as all-zero columns.
pub fn one_hot(hard: &HardLabelMap, num_classes: usize) -> Result<LabelMap> {
    hard.validate(num_classes)?;
    let (h, w) = hard.labels.dim();
    let mut scores = Array3::<f64>::zeros((num_classes, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = hard.labels[[y, x]];
            if v != IGNORE {
                scores[[v as usize, y, x]] = 1.0;
            }
        }
    }
    LabelMap::probabilities(scores)
}
