//! Seeded synthetic corpus generator.
//!
//! Scenes are colored geometric objects on a noisy dark background — one
//! shape/color family per class. Each image carries a hidden dense mask
//! (class indices, later objects occlude earlier ones) and weak labels derived
//! from the classes actually visible after occlusion. Class frequencies stay
//! roughly uniform via a shuffled round-robin class queue.

use crate::dataset::{write_image_png, write_mask_png, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::types::{HardLabelMap, Image, ImageLevelLabels, TrainSample};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Maximum number of distinct classes per scene (1 gives single-class
    /// scenes, which maximizes forgetting pressure in incremental runs).
    pub max_distinct_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_images: 200,
            val_images: 60,
            min_objects: 1,
            max_objects: 4,
            max_distinct_classes: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.image_size > 512 {
            return Err(Error::config("synthetic.image_size must be in 16..=512"));
        }
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(Error::config("synthetic object counts must satisfy 1 <= min <= max"));
        }
        if self.max_distinct_classes < 1 {
            return Err(Error::config("synthetic.max_distinct_classes must be >= 1"));
        }
        if self.train_images == 0 {
            return Err(Error::config("synthetic.train_images must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Plus,
    Ring,
    HBar,
    Ellipse,
}

const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Plus,
    Shape::Ring,
    Shape::HBar,
    Shape::Ellipse,
];

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.20], // red
    [0.20, 0.75, 0.25], // green
    [0.25, 0.35, 0.95], // blue
    [0.95, 0.85, 0.20], // yellow
    [0.85, 0.30, 0.85], // magenta
    [0.20, 0.85, 0.85], // cyan
    [0.95, 0.55, 0.15], // orange
    [0.60, 0.95, 0.55], // light green
];

fn inside(shape: Shape, dy: f64, dx: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= r && dx.abs() <= r,
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        Shape::Diamond => dy.abs() + dx.abs() <= r,
        Shape::Plus => (dy.abs() <= r / 3.0 && dx.abs() <= r) || (dx.abs() <= r / 3.0 && dy.abs() <= r),
        Shape::Ring => {
            let d2 = dy * dy + dx * dx;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::HBar => dy.abs() <= r / 2.5 && dx.abs() <= r,
        Shape::Ellipse => {
            let a = r;
            let b = 0.6 * r;
            (dy / b) * (dy / b) + (dx / a) * (dx / a) <= 1.0
        }
    }
}

/// Renders one scene. `class_queue` supplies classes in balanced order;
/// `class_index` values are 1-based positions in the full class list.
fn render_scene(
    id: &str,
    classes: &[String],
    queue: &mut Vec<usize>,
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
) -> Result<TrainSample> {
    let size = cfg.image_size;
    let mut pixels = Array3::<f64>::zeros((3, size, size));
    // dark noisy background with a slight diagonal gradient
    for y in 0..size {
        for x in 0..size {
            let base = 0.08 + 0.06 * (y + x) as f64 / (2 * size) as f64;
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-0.02..0.02);
                pixels[[c, y, x]] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut mask = Array2::<i32>::zeros((size, size));

    let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    // scene palette: up to max_distinct_classes drawn from the balance queue
    let distinct = rng.gen_range(1..=cfg.max_distinct_classes.min(n_objects).max(1));
    let mut scene_classes = Vec::with_capacity(distinct);
    for _ in 0..distinct {
        if queue.is_empty() {
            let mut refill: Vec<usize> = (0..classes.len()).collect();
            refill.shuffle(rng);
            queue.extend(refill);
        }
        scene_classes.push(queue.pop().unwrap());
    }

    for obj in 0..n_objects {
        let class_pos = scene_classes[obj % scene_classes.len()];
        let class_idx = (class_pos + 1) as i32; // 0 is background
        let shape = SHAPES[class_pos % SHAPES.len()];
        let color = PALETTE[class_pos % PALETTE.len()];
        let r = rng.gen_range(size as f64 * 0.10..size as f64 * 0.22);
        let cy = rng.gen_range(r..size as f64 - r);
        let cx = rng.gen_range(r..size as f64 - r);
        let jitter: [f64; 3] = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        for y in 0..size {
            for x in 0..size {
                if inside(shape, y as f64 - cy, x as f64 - cx, r) {
                    mask[[y, x]] = class_idx;
                    for c in 0..3 {
                        let noise: f64 = rng.gen_range(-0.02..0.02);
                        pixels[[c, y, x]] = (color[c] + jitter[c] + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    // weak labels reflect what survived occlusion
    let hard = HardLabelMap::new(mask);
    let present = hard.present_classes();
    if present.is_empty() {
        // fully occluded scenes are re-rolled by the caller
        return Err(Error::validation("scene rendered with no visible object"));
    }
    let weak = ImageLevelLabels::new(present.iter().map(|&i| classes[i - 1].clone()))?;
    let image = Image::new(pixels, id)?;
    TrainSample::new(image, weak, Some(hard))
}

fn generate_split(
    classes: &[String],
    count: usize,
    prefix: &str,
    stream: u64,
    cfg: &SyntheticConfig,
) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut queue = Vec::new();
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    while out.len() < count {
        let id = format!("{prefix}_{:05}", out.len());
        match render_scene(&id, classes, &mut queue, &mut rng, cfg) {
            Ok(sample) => out.push(sample),
            Err(_) if i < count * 20 => {} // occluded-away scene, draw again
            Err(e) => return Err(e),
        }
        i += 1;
    }
    Ok(out)
}

/// Generates train and val splits under `out_dir` (`train/`, `val/` each with
/// a manifest). Deterministic: the same config and seed produce byte-identical
/// directories.
pub fn generate(classes: &[String], background: &str, cfg: &SyntheticConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    if classes.is_empty() {
        return Err(Error::config("synthetic generation needs at least one class"));
    }
    for (split, count, stream) in
        [("train", cfg.train_images, 0u64), ("val", cfg.val_images, 1u64)]
    {
        if count == 0 {
            continue;
        }
        let samples = generate_split(classes, count, split, stream, cfg)?;
        let dir = out_dir.join(split);
        let mut entries = Vec::with_capacity(samples.len());
        for sample in &samples {
            let image_rel = format!("images/{}.png", sample.id());
            let mask_rel = format!("masks/{}.png", sample.id());
            write_image_png(&dir.join(&image_rel), &sample.image)?;
            write_mask_png(&dir.join(&mask_rel), sample.hidden_mask.as_ref().unwrap())?;
            entries.push(ManifestEntry {
                id: sample.id().to_string(),
                image: image_rel.into(),
                weak_labels: sample.weak_labels.names().map(String::from).collect(),
                mask: Some(mask_rel.into()),
            });
        }
        Manifest {
            classes: classes.to_vec(),
            background: background.to_string(),
            samples: entries,
        }
        .save(&dir)?;
    }
    Ok(())
}

/// In-memory generation of the train split (used by tests and examples).
pub fn generate_in_memory(
    classes: &[String],
    cfg: &SyntheticConfig,
) -> Result<Vec<TrainSample>> {
    cfg.validate()?;
    generate_split(classes, cfg.train_images, "train", 0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig { train_images: 6, val_images: 0, ..Default::default() };
        let classes = class_names(6);
        let a = generate_in_memory(&classes, &cfg).unwrap();
        let b = generate_in_memory(&classes, &cfg).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.pixels, y.image.pixels);
            assert_eq!(
                x.hidden_mask.as_ref().unwrap().labels,
                y.hidden_mask.as_ref().unwrap().labels
            );
        }
    }

    #[test]
    fn every_scene_has_one_to_four_distinct_classes() {
        let cfg = SyntheticConfig { train_images: 40, val_images: 0, ..Default::default() };
        let samples = generate_in_memory(&class_names(6), &cfg).unwrap();
        for s in &samples {
            let present = s.hidden_mask.as_ref().unwrap().present_classes();
            assert!(
                !present.is_empty() && present.len() <= 4,
                "scene {} has {} classes",
                s.id(),
                present.len()
            );
            // weak labels mirror the mask census exactly
            let weak: Vec<String> = s.weak_labels.names().map(String::from).collect();
            assert_eq!(weak.len(), present.len());
        }
    }

    #[test]
    fn class_frequencies_stay_roughly_uniform() {
        let cfg = SyntheticConfig { train_images: 120, val_images: 0, ..Default::default() };
        let classes = class_names(6);
        let samples = generate_in_memory(&classes, &cfg).unwrap();
        let mut counts = vec![0usize; 6];
        for s in &samples {
            for idx in s.hidden_mask.as_ref().unwrap().present_classes() {
                counts[idx - 1] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let mean = total as f64 / 6.0;
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 0.2 * mean,
                "class {i} appears {c} times vs mean {mean:.1}"
            );
        }
    }

    #[test]
    fn single_class_scenes_when_requested() {
        let cfg = SyntheticConfig {
            train_images: 20,
            val_images: 0,
            max_distinct_classes: 1,
            ..Default::default()
        };
        let samples = generate_in_memory(&class_names(6), &cfg).unwrap();
        for s in &samples {
            assert_eq!(s.hidden_mask.as_ref().unwrap().present_classes().len(), 1);
        }
    }

    #[test]
    fn on_disk_generation_round_trips_and_is_byte_identical() {
        let cfg = SyntheticConfig { train_images: 4, val_images: 2, image_size: 32, ..Default::default() };
        let classes = class_names(3);
        let dir = tempfile::tempdir().unwrap();
        generate(&classes, "background", &cfg, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join("train/images/train_00000.png")).unwrap();
        generate(&classes, "background", &cfg, dir.path()).unwrap();
        let second = std::fs::read(dir.path().join("train/images/train_00000.png")).unwrap();
        assert_eq!(first, second);

        let corpus = crate::dataset::Corpus::load(&dir.path().join("train")).unwrap();
        assert_eq!(corpus.len(), 4);
        let val = crate::dataset::Corpus::load(&dir.path().join("val")).unwrap();
        assert_eq!(val.len(), 2);
    }
}
