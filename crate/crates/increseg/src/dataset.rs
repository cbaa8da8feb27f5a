//! Dataset manifests and the in-memory corpus.
//!
//! A dataset directory holds `manifest.json` plus lossless PNG rasters:
//! RGB images and optional 8-bit hidden masks where pixel values are class
//! indices and 255 means IGNORE. The manifest lists sample ids, file paths,
//! and weak-label class names.
//!
//! [`Corpus`] instruments every sample access so the incremental protocol can
//! prove that a task never touched another task's data.

use crate::error::{Error, Result};
use crate::types::{HardLabelMap, Image, ImageLevelLabels, TrainSample, IGNORE};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub weak_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// All foreground class names this dataset may contain.
    pub classes: Vec<String>,
    pub background: String,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: format!("dataset manifest at {}", path.display()),
                hint: "gen-synthetic".into(),
            });
        }
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    let (_, h, w) = image.pixels.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((image.pixels[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

pub fn read_image_png(path: &Path, id: &str) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                pixels[[c, y, x]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Image::new(pixels, id)
}

pub fn write_mask_png(path: &Path, mask: &HardLabelMap) -> Result<()> {
    let (h, w) = mask.labels.dim();
    let mut buf = Vec::with_capacity(h * w);
    for &v in mask.labels.iter() {
        if v == IGNORE {
            buf.push(255u8);
        } else if (0..255).contains(&v) {
            buf.push(v as u8);
        } else {
            return Err(Error::validation(format!("mask value {v} not encodable as 8-bit")));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<HardLabelMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut labels = Array2::<i32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            labels[[y, x]] = if v == 255 { IGNORE } else { v as i32 };
        }
    }
    Ok(HardLabelMap::new(labels))
}

/// A fully loaded dataset with an access log.
///
/// Every `get` records the sample id; the incremental protocol clears the log
/// at task boundaries and asserts that a task only ever pulled samples from
/// its own split.
pub struct Corpus {
    classes: Vec<String>,
    background: String,
    samples: Vec<TrainSample>,
    by_id: BTreeMap<String, usize>,
    access_log: Mutex<BTreeSet<String>>,
}

impl Corpus {
    pub fn from_samples(
        classes: Vec<String>,
        background: String,
        samples: Vec<TrainSample>,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if by_id.insert(s.id().to_string(), i).is_some() {
                return Err(Error::validation(format!("duplicate sample id '{}'", s.id())));
            }
        }
        Ok(Self { classes, background, samples, by_id, access_log: Mutex::new(BTreeSet::new()) })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let image = read_image_png(&dir.join(&entry.image), &entry.id)?;
            let mask = match &entry.mask {
                Some(rel) => Some(read_mask_png(&dir.join(rel))?),
                None => None,
            };
            let weak = ImageLevelLabels::new(entry.weak_labels.iter().cloned())?;
            samples.push(TrainSample::new(image, weak, mask)?);
        }
        Self::from_samples(manifest.classes, manifest.background, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn background(&self) -> &str {
        &self.background
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id())
    }

    /// Fetch a sample, recording the access.
    pub fn get(&self, id: &str) -> Result<&TrainSample> {
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| Error::validation(format!("unknown sample id '{id}'")))?;
        self.access_log.lock().unwrap().insert(id.to_string());
        Ok(&self.samples[idx])
    }

    /// Inspect a sample without recording an access (evaluation and split
    /// computation use this; training must go through [`Corpus::get`]).
    pub fn peek(&self, id: &str) -> Result<&TrainSample> {
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| Error::validation(format!("unknown sample id '{id}'")))?;
        Ok(&self.samples[idx])
    }

    pub fn iter_peek(&self) -> impl Iterator<Item = &TrainSample> {
        self.samples.iter()
    }

    pub fn access_log(&self) -> BTreeSet<String> {
        self.access_log.lock().unwrap().clone()
    }

    pub fn clear_access_log(&self) {
        self.access_log.lock().unwrap().clear();
    }
}
