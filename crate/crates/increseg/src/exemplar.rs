//! Exemplar memory and exemplar-guided replay augmentation.
//!
//! After each task, objects of every learned class are cropped out of the
//! training images using the hard pseudo-labels (connected components with a
//! tight bounding box) and kept in a per-class budgeted store. During later
//! tasks a random exemplar is composed into a random region of a current
//! training image through a pluggable [`ImageEditor`]; the built-in
//! [`MaskedBlendEditor`] alpha-composites with feathered mask edges, and
//! [`SubprocessEditor`] hands the job to an external program (the attach
//! point for a real image-editing diffusion model).

use crate::error::{Error, Result};
use crate::types::{
    HardLabelMap, Image, TaskSchedule, TrainSample,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One cropped object: tight image crop plus the binary object mask inside it.
#[derive(Debug, Clone)]
pub struct ExemplarItem {
    pub class_name: String,
    pub crop: Image,
    pub crop_mask: Array2<bool>,
    pub source_sample_id: String,
    /// (top, left, height, width) of the crop in the source image.
    pub bbox: (usize, usize, usize, usize),
}

/// Per-class exemplar lists, each capped at `budget_per_class`.
#[derive(Debug, Clone, Default)]
pub struct ExemplarSet {
    items: BTreeMap<String, Vec<ExemplarItem>>,
    pub budget_per_class: usize,
    pub warnings: Vec<String>,
}

impl ExemplarSet {
    pub fn class_items(&self, class: &str) -> &[ExemplarItem] {
        self.items.get(class).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(|s| s.as_str())
    }

    pub fn total_items(&self) -> usize {
        self.items.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_items() == 0
    }

    fn all_items(&self) -> Vec<&ExemplarItem> {
        self.items.values().flatten().collect()
    }
}

/// 4-connected components of `class` in a hard label map. Components are
/// emitted in scanline order of their first pixel.
pub fn connected_components(hard: &HardLabelMap, class: i32) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = hard.labels.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut components = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if hard.labels[[y, x]] != class || seen[[y, x]] {
                continue;
            }
            let mut stack = vec![(y, x)];
            let mut pixels = Vec::new();
            seen[[y, x]] = true;
            while let Some((cy, cx)) = stack.pop() {
                pixels.push((cy, cx));
                let mut push = |ny: usize, nx: usize| {
                    if hard.labels[[ny, nx]] == class && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx);
                }
                if cy + 1 < h {
                    push(cy + 1, cx);
                }
                if cx > 0 {
                    push(cy, cx - 1);
                }
                if cx + 1 < w {
                    push(cy, cx + 1);
                }
            }
            components.push(pixels);
        }
    }
    components
}

fn crop_component(
    image: &Image,
    pixels: &[(usize, usize)],
    class_name: &str,
    sample_id: &str,
) -> ExemplarItem {
    let y0 = pixels.iter().map(|p| p.0).min().unwrap();
    let y1 = pixels.iter().map(|p| p.0).max().unwrap();
    let x0 = pixels.iter().map(|p| p.1).min().unwrap();
    let x1 = pixels.iter().map(|p| p.1).max().unwrap();
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let mut crop = Array3::<f64>::zeros((3, bh, bw));
    for y in 0..bh {
        for x in 0..bw {
            for c in 0..3 {
                crop[[c, y, x]] = image.pixels[[c, y0 + y, x0 + x]];
            }
        }
    }
    let mut mask = Array2::<bool>::from_elem((bh, bw), false);
    for &(y, x) in pixels {
        mask[[y - y0, x - x0]] = true;
    }
    ExemplarItem {
        class_name: class_name.to_string(),
        crop: Image::new(crop, format!("{sample_id}_crop")).expect("crop pixels valid"),
        crop_mask: mask,
        source_sample_id: sample_id.to_string(),
        bbox: (y0, x0, bh, bw),
    }
}

/// Builds (or rebuilds) the exemplar store from hard pseudo-labels.
///
/// For every foreground class in `classes`, connected components with a
/// bounding-box area of at least `min_area` become candidate crops; up to
/// `budget` are kept per class, sampled without replacement with a seed
/// derived per class. Items from `carryover` are kept first and topped up
/// with new candidates, since older classes may not appear in the current
/// task's data at all. Classes that end up empty produce a warning record.
pub fn build_exemplar_set<'a>(
    samples: impl Iterator<Item = (&'a TrainSample, &'a HardLabelMap)>,
    classes: &[String],
    budget: usize,
    min_area: usize,
    seed: u64,
    carryover: Option<&ExemplarSet>,
) -> Result<ExemplarSet> {
    if budget < 1 {
        return Err(Error::validation("exemplar budget must be >= 1"));
    }
    let mut candidates: BTreeMap<String, Vec<ExemplarItem>> =
        classes.iter().skip(1).map(|c| (c.clone(), Vec::new())).collect();
    for (sample, hard) in samples {
        for (idx, name) in classes.iter().enumerate().skip(1) {
            for comp in connected_components(hard, idx as i32) {
                let item = crop_component(&sample.image, &comp, name, sample.id());
                if item.bbox.2 * item.bbox.3 >= min_area {
                    candidates.get_mut(name).unwrap().push(item);
                }
            }
        }
    }

    let mut set = ExemplarSet {
        items: BTreeMap::new(),
        budget_per_class: budget,
        warnings: Vec::new(),
    };
    for (class, mut cands) in candidates {
        let mut kept: Vec<ExemplarItem> = Vec::new();
        if let Some(prev) = carryover {
            kept.extend(prev.class_items(&class).iter().take(budget).cloned());
        }
        let room = budget.saturating_sub(kept.len());
        if cands.len() > room {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_add(crate::seeding::hash_str(&class)));
            let mut chosen: Vec<usize> =
                rand::seq::index::sample(&mut rng, cands.len(), room).into_vec();
            chosen.sort_unstable();
            let mut picked = Vec::with_capacity(room);
            for idx in chosen.into_iter().rev() {
                picked.push(cands.swap_remove(idx));
            }
            picked.reverse();
            kept.extend(picked);
        } else {
            kept.extend(cands);
        }
        if kept.is_empty() {
            set.warnings.push(format!("class '{class}' has no exemplar candidates"));
        }
        set.items.insert(class, kept);
    }
    Ok(set)
}

/// Rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Composes an exemplar object into a rectangular region of a scene.
pub trait ImageEditor: Send + Sync {
    fn edit(&self, scene: &Image, region: &Rect, exemplar: &ExemplarItem) -> Result<Image>;

    /// How far outside the region this editor may touch pixels.
    fn feather_margin(&self) -> usize {
        0
    }
}

/// Resizes the exemplar crop to the region and alpha-composites it under its
/// (optionally feathered) mask. Pixels outside the region never change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBlendEditor {
    /// Blend strength inside the mask; 1.0 pastes exemplar pixels verbatim.
    pub blend: f64,
    /// Gaussian feather radius for mask edges; 0 gives a hard binary paste.
    pub feather_radius: usize,
}

impl Default for MaskedBlendEditor {
    fn default() -> Self {
        Self { blend: 1.0, feather_radius: 1 }
    }
}

fn resize_bilinear_2d(src: &Array2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let expanded = src.clone().insert_axis(ndarray::Axis(0));
    crate::layers::upsample_bilinear(&expanded, th, tw).index_axis_move(ndarray::Axis(0), 0)
}

fn gaussian_blur(mask: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return mask.clone();
    }
    let sigma = radius as f64 / 1.5;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (h, w) = mask.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = (x + i).saturating_sub(radius).min(w - 1);
                acc += kv * mask[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = (y + i).saturating_sub(radius).min(h - 1);
                acc += kv * tmp[[sy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

impl ImageEditor for MaskedBlendEditor {
    fn edit(&self, scene: &Image, region: &Rect, exemplar: &ExemplarItem) -> Result<Image> {
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::validation("blend must be in [0, 1]"));
        }
        let (sh, sw) = (scene.height(), scene.width());
        if region.y + region.h > sh || region.x + region.w > sw || region.h == 0 || region.w == 0 {
            return Err(Error::validation("edit region out of scene bounds"));
        }
        let crop_f = exemplar.crop_mask.mapv(|b| if b { 1.0 } else { 0.0 });
        let mut alpha = resize_bilinear_2d(&crop_f, region.h, region.w);
        if self.feather_radius == 0 {
            alpha.mapv_inplace(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        } else {
            alpha = gaussian_blur(&alpha, self.feather_radius);
        }
        let resized = crate::layers::upsample_bilinear(&exemplar.crop.pixels, region.h, region.w);

        let mut pixels = scene.pixels.clone();
        for y in 0..region.h {
            for x in 0..region.w {
                let a = alpha[[y, x]] * self.blend;
                if a == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let sv = pixels[[c, region.y + y, region.x + x]];
                    pixels[[c, region.y + y, region.x + x]] =
                        ((1.0 - a) * sv + a * resized[[c, y, x]]).clamp(0.0, 1.0);
                }
            }
        }
        Image::new(pixels, format!("{}_edit", scene.id))
    }
}

/// Runs an external editor: `command <scene.png> <region_mask.png>
/// <exemplar.png> <output.png>`. The region mask is a scene-sized binary
/// image. This is where a real editing diffusion model plugs in.
#[derive(Debug, Clone)]
pub struct SubprocessEditor {
    pub command: PathBuf,
    pub feather_margin: usize,
}

impl ImageEditor for SubprocessEditor {
    fn edit(&self, scene: &Image, region: &Rect, exemplar: &ExemplarItem) -> Result<Image> {
        let dir = std::env::temp_dir().join(format!(
            "increseg_edit_{}_{}",
            std::process::id(),
            scene.id.replace(['/', '\\'], "_")
        ));
        std::fs::create_dir_all(&dir)?;
        let scene_path = dir.join("scene.png");
        let mask_path = dir.join("mask.png");
        let exemplar_path = dir.join("exemplar.png");
        let out_path = dir.join("out.png");
        crate::dataset::write_image_png(&scene_path, scene)?;
        let mut mask = Array2::<i32>::zeros((scene.height(), scene.width()));
        for y in region.y..region.y + region.h {
            for x in region.x..region.x + region.w {
                mask[[y, x]] = 1;
            }
        }
        crate::dataset::write_mask_png(&mask_path, &HardLabelMap::new(mask))?;
        crate::dataset::write_image_png(&exemplar_path, &exemplar.crop)?;

        let status = std::process::Command::new(&self.command)
            .arg(&scene_path)
            .arg(&mask_path)
            .arg(&exemplar_path)
            .arg(&out_path)
            .status()?;
        if !status.success() {
            return Err(Error::validation(format!(
                "external editor exited with {status}"
            )));
        }
        let out = crate::dataset::read_image_png(&out_path, &format!("{}_edit", scene.id))?;
        if out.height() != scene.height() || out.width() != scene.width() {
            return Err(Error::validation("external editor changed the scene dimensions"));
        }
        let _ = std::fs::remove_dir_all(&dir);
        Ok(out)
    }

    fn feather_margin(&self) -> usize {
        self.feather_margin
    }
}

/// Region sampling policy for [`augment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    /// Region long side as a fraction of min(H, W), sampled uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { scale_min: 0.2, scale_max: 0.5 }
    }
}

/// Seeded augmentation-rate decision, one draw per (sample, epoch).
pub fn augment_decision(seed: u64, p_aug: f64) -> bool {
    ChaCha8Rng::seed_from_u64(seed).gen::<f64>() < p_aug
}

/// Composes a random exemplar into a random region of the scene.
///
/// The returned sample's weak labels gain the exemplar's class, and its
/// hidden mask (when present) is overwritten with the exemplar class under
/// the resized crop mask so the synthetic oracle stays consistent with the
/// edited pixels. Returns `Ok(None)` when the exemplar set is empty.
pub fn augment(
    scene: &TrainSample,
    set: &ExemplarSet,
    editor: &dyn ImageEditor,
    region_cfg: &RegionConfig,
    schedule: &TaskSchedule,
    seed: u64,
) -> Result<Option<TrainSample>> {
    if set.is_empty() {
        return Ok(None);
    }
    let (h, w) = (scene.image.height(), scene.image.width());
    if h < 8 || w < 8 {
        return Err(Error::validation("scene too small for augmentation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = set.all_items();
    let item = items[rng.gen_range(0..items.len())];

    // region: scale from config, aspect follows the crop, uniform centre
    let (ch, cw) = (item.bbox.2 as f64, item.bbox.3 as f64);
    let long = rng.gen_range(region_cfg.scale_min..region_cfg.scale_max)
        * h.min(w) as f64;
    let (mut rh, mut rw) = if ch >= cw {
        (long, (long * cw / ch).max(4.0))
    } else {
        ((long * ch / cw).max(4.0), long)
    };
    rh = rh.min(h as f64).max(4.0);
    rw = rw.min(w as f64).max(4.0);
    let rh = rh.round() as usize;
    let rw = rw.round() as usize;
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let y = cy.saturating_sub(rh / 2).min(h - rh);
    let x = cx.saturating_sub(rw / 2).min(w - rw);
    let region = Rect { y, x, h: rh, w: rw };

    let edited = editor.edit(&scene.image, &region, item)?;
    if edited.height() != h || edited.width() != w {
        return Err(Error::validation("editor output dimensions differ from scene"));
    }
    let mut edited = edited;
    edited.id = format!("{}#aug{seed}", scene.id());

    let weak = scene.weak_labels.with_class(&item.class_name);

    let hidden = match &scene.hidden_mask {
        Some(mask) => {
            let class_idx = 1 + schedule
                .all_classes()
                .iter()
                .position(|n| n == &item.class_name)
                .ok_or_else(|| {
                    Error::validation(format!("exemplar class '{}' not in schedule", item.class_name))
                })?;
            let crop_f = item.crop_mask.mapv(|b| if b { 1.0 } else { 0.0 });
            let alpha = resize_bilinear_2d(&crop_f, region.h, region.w);
            let mut labels = mask.labels.clone();
            for yy in 0..region.h {
                for xx in 0..region.w {
                    if alpha[[yy, xx]] >= 0.5 {
                        labels[[region.y + yy, region.x + xx]] = class_idx as i32;
                    }
                }
            }
            Some(HardLabelMap::new(labels))
        }
        None => None,
    };
    Ok(Some(TrainSample::new(edited, weak, hidden)?))
}

// ── disk store ──────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct StoreItemRecord {
    source_sample_id: String,
    bbox: (usize, usize, usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreClassManifest {
    class: String,
    items: Vec<StoreItemRecord>,
}

/// Writes the exemplar store: one directory per class holding crop and mask
/// images plus a manifest with source ids and bounding boxes.
pub fn save_exemplar_set(set: &ExemplarSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "budget_per_class": set.budget_per_class,
        "warnings": set.warnings,
        "classes": set.classes().collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("store.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    for class in set.classes() {
        let class_dir = dir.join(class);
        std::fs::create_dir_all(&class_dir)?;
        let mut records = Vec::new();
        for (i, item) in set.class_items(class).iter().enumerate() {
            crate::dataset::write_image_png(&class_dir.join(format!("crop_{i:03}.png")), &item.crop)?;
            let mask =
                HardLabelMap::new(item.crop_mask.mapv(|b| if b { 1i32 } else { 0 }));
            crate::dataset::write_mask_png(&class_dir.join(format!("mask_{i:03}.png")), &mask)?;
            records.push(StoreItemRecord {
                source_sample_id: item.source_sample_id.clone(),
                bbox: item.bbox,
            });
        }
        let manifest = StoreClassManifest { class: class.to_string(), items: records };
        std::fs::write(
            class_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
    }
    Ok(())
}

pub fn load_exemplar_set(dir: &Path) -> Result<ExemplarSet> {
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("store.json"))?)?;
    let budget = meta["budget_per_class"].as_u64().unwrap_or(50) as usize;
    let warnings = meta["warnings"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .unwrap_or_default();
    let mut items = BTreeMap::new();
    let classes: Vec<String> = meta["classes"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .unwrap_or_default();
    for class in classes {
        let class_dir = dir.join(&class);
        let manifest: StoreClassManifest =
            serde_json::from_str(&std::fs::read_to_string(class_dir.join("manifest.json"))?)?;
        let mut list = Vec::with_capacity(manifest.items.len());
        for (i, rec) in manifest.items.iter().enumerate() {
            let crop = crate::dataset::read_image_png(
                &class_dir.join(format!("crop_{i:03}.png")),
                &format!("{}_crop", rec.source_sample_id),
            )?;
            let mask = crate::dataset::read_mask_png(&class_dir.join(format!("mask_{i:03}.png")))?;
            list.push(ExemplarItem {
                class_name: class.clone(),
                crop,
                crop_mask: mask.labels.mapv(|v| v == 1),
                source_sample_id: rec.source_sample_id.clone(),
                bbox: rec.bbox,
            });
        }
        items.insert(class, list);
    }
    Ok(ExemplarSet { items, budget_per_class: budget, warnings })
}
