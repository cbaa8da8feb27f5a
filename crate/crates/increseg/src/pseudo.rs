//! Dense pseudo-label generation: prompt construction, entropy-based
//! uncertainty weighting, and the soft fusion of oracle masks with localizer
//! predictions.
//!
//! Per pixel, the fused soft label is
//!
//! ```text
//! soft[c] = w * fdt[c] + (1 - w) * sigmoid(loc[c])
//! w       = -sum_c softmax(loc)[c] * ln(softmax(loc)[c]) / ln(num_classes)
//! ```
//!
//! so a confident localizer keeps its own prediction while an uncertain one
//! defers to the foundation oracle. Hard labels are the per-pixel argmax with
//! a background fallback where no foreground class clears the threshold.

use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::oracle::FoundationOracle;
use crate::types::{
    accumulated_classes, harden, HardLabelMap, Image, LabelMap, MapKind, TaskSchedule,
    TrainSample, IGNORE,
};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;

/// Which class count normalizes the per-pixel entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyDenominator {
    /// All accumulated classes (the localizer's channel count). Default.
    Accumulated,
    /// Only the classes introduced at the current task.
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    /// Pixels where every foreground fused score is below this become background.
    pub background_threshold: f64,
    pub entropy_denominator: EntropyDenominator,
    /// When false, the oracle is not consulted and pseudo-labels come from the
    /// localizer alone (the no-fusion baseline of the ablation grid).
    pub fusion_enabled: bool,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            background_threshold: 0.5,
            entropy_denominator: EntropyDenominator::Accumulated,
            fusion_enabled: true,
        }
    }
}

/// Per-pixel normalized entropy of the localizer distribution, in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct EntropyWeights {
    pub w: Array2<f64>,
}

/// Entropy weights normalized by the localizer's own class count.
pub fn entropy_weights(loc_logits: &LabelMap) -> Result<EntropyWeights> {
    entropy_weights_with_count(loc_logits, loc_logits.num_classes())
}

/// Entropy weights with an explicit normalizing class count (used when the
/// normalization should count only the current task's classes).
pub fn entropy_weights_with_count(
    loc_logits: &LabelMap,
    norm_classes: usize,
) -> Result<EntropyWeights> {
    if loc_logits.kind != MapKind::Logits {
        return Err(Error::validation("entropy_weights expects logits"));
    }
    let (c, h, w) = loc_logits.scores.dim();
    if c < 2 {
        return Err(Error::validation(
            "entropy normalization needs at least 2 classes (log |C| would be zero)",
        ));
    }
    if norm_classes < 2 {
        return Err(Error::validation("entropy normalizing count must be >= 2"));
    }
    if loc_logits.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("entropy_weights: non-finite logits"));
    }
    let denom = (norm_classes as f64).ln();
    let mut out = Array2::<f64>::zeros((h, w));
    let mut p = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for k in 0..c {
                maxv = maxv.max(loc_logits.scores[[k, y, x]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                p[k] = (loc_logits.scores[[k, y, x]] - maxv).exp();
                z += p[k];
            }
            let mut entropy = 0.0;
            for pk in p.iter().take(c) {
                let prob = pk / z;
                entropy -= prob * prob.max(1e-12).ln();
            }
            out[[y, x]] = (entropy / denom).clamp(0.0, 1.0);
        }
    }
    Ok(EntropyWeights { w: out })
}

/// Pixel-wise convex combination of oracle masks and localizer sigmoids.
pub fn fuse(fdt: &LabelMap, loc_logits: &LabelMap, w: &EntropyWeights) -> Result<LabelMap> {
    if fdt.kind != MapKind::Probabilities {
        return Err(Error::validation("fuse: fdt must be probabilities"));
    }
    if loc_logits.kind != MapKind::Logits {
        return Err(Error::validation("fuse: localizer map must be logits"));
    }
    let dim = fdt.scores.dim();
    if dim != loc_logits.scores.dim() {
        return Err(Error::validation("fuse: map shape mismatch"));
    }
    let (c, h, wd) = dim;
    if w.w.dim() != (h, wd) {
        return Err(Error::validation("fuse: weight shape mismatch"));
    }
    let mut out = Array3::<f64>::zeros(dim);
    for k in 0..c {
        for y in 0..h {
            for x in 0..wd {
                let ww = w.w[[y, x]];
                out[[k, y, x]] = ww * fdt.scores[[k, y, x]]
                    + (1.0 - ww) * sigmoid(loc_logits.scores[[k, y, x]]);
            }
        }
    }
    LabelMap::probabilities(out)
}

/// Class names to prompt the oracle with: the sample's image-level labels
/// plus, after the first task, every foreground class the frozen previous
/// network predicts in the image. Deduplicated, in class-index order.
pub fn build_prompt(
    sample: &TrainSample,
    prev_prediction: Option<&HardLabelMap>,
    schedule: &TaskSchedule,
    t: usize,
) -> Result<Vec<String>> {
    let acc = accumulated_classes(schedule, t)?;
    if t == 1 && prev_prediction.is_some() {
        return Err(Error::validation("build_prompt: no previous network exists at task 1"));
    }
    if t > 1 && prev_prediction.is_none() {
        return Err(Error::validation(
            "build_prompt: tasks after the first need the frozen network's prediction",
        ));
    }
    let mut indices = std::collections::BTreeSet::new();
    for name in sample.weak_labels.names() {
        let idx = acc
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::validation(format!("weak label '{name}' unknown at task {t}")))?;
        if idx > 0 {
            indices.insert(idx);
        }
    }
    if let Some(pred) = prev_prediction {
        for idx in pred.present_classes() {
            if idx >= acc.len() {
                return Err(Error::validation(
                    "build_prompt: previous prediction contains unknown class indices",
                ));
            }
            indices.insert(idx);
        }
    }
    Ok(indices.into_iter().map(|i| acc[i].clone()).collect())
}

/// Full pseudo-label generation for one sample at task `t`.
///
/// Composes prompt construction, the oracle, entropy weighting, fusion, and
/// hardening. Pixels where every foreground fused score stays below the
/// background threshold are assigned background.
pub fn generate_pseudo_labels<L, P>(
    sample: &TrainSample,
    oracle: &dyn FoundationOracle,
    localizer_forward: L,
    prev_predict: Option<P>,
    schedule: &TaskSchedule,
    t: usize,
    cfg: &PseudoLabelConfig,
) -> Result<(LabelMap, HardLabelMap)>
where
    L: FnOnce(&Image) -> Result<LabelMap>,
    P: FnOnce(&Image) -> Result<HardLabelMap>,
{
    let acc = accumulated_classes(schedule, t)?;
    let num_classes = acc.len();

    let prev_prediction = match prev_predict {
        Some(f) => Some(f(&sample.image)?),
        None => None,
    };
    let prompt = build_prompt(sample, prev_prediction.as_ref(), schedule, t)?;

    let loc_logits = localizer_forward(&sample.image)?;
    if loc_logits.num_classes() != num_classes {
        return Err(Error::validation(format!(
            "localizer produced {} channels, expected {num_classes}",
            loc_logits.num_classes()
        )));
    }
    let (h, w) = (sample.image.height(), sample.image.width());
    if (loc_logits.height(), loc_logits.width()) != (h, w) {
        return Err(Error::validation("localizer output does not match image size"));
    }

    let soft = if cfg.fusion_enabled {
        let fdt = oracle.generate(sample, &prompt, &acc).map_err(|e| match e {
            err @ Error::Oracle { .. } => err,
            other => Error::Oracle {
                sample_id: sample.id().to_string(),
                detail: other.to_string(),
            },
        })?;
        if fdt.scores.dim() != loc_logits.scores.dim() {
            return Err(Error::Oracle {
                sample_id: sample.id().to_string(),
                detail: "oracle output shape mismatch".into(),
            });
        }
        let weights = match cfg.entropy_denominator {
            EntropyDenominator::Accumulated => entropy_weights(&loc_logits)?,
            EntropyDenominator::Novel => {
                let novel = schedule.task_classes(t)?.len().max(2);
                entropy_weights_with_count(&loc_logits, novel)?
            }
        };
        fuse(&fdt, &loc_logits, &weights)?
    } else {
        LabelMap::probabilities(loc_logits.scores.mapv(sigmoid))?
    };

    let mut hard = harden(&soft)?;
    for y in 0..h {
        for x in 0..w {
            let mut best_fg = 0.0f64;
            for k in 1..num_classes {
                best_fg = best_fg.max(soft.scores[[k, y, x]]);
            }
            if best_fg < cfg.background_threshold {
                hard.labels[[y, x]] = 0;
            }
        }
    }
    Ok((soft, hard))
}

// ── offline cache ───────────────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 4] = b"PLC1";

/// On-disk pseudo-label cache, one file per (sample, task, oracle config).
/// Soft maps are stored as 16-bit fixed point per channel.
pub struct PseudoCache {
    dir: PathBuf,
}

impl PseudoCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, sample_id: &str, t: usize, oracle_digest: &str) -> PathBuf {
        self.dir.join(format!("{sample_id}_t{t}_{oracle_digest}.plc"))
    }

    pub fn store(
        &self,
        sample_id: &str,
        t: usize,
        oracle_digest: &str,
        soft: &LabelMap,
        hard: &HardLabelMap,
    ) -> Result<()> {
        let path = self.path(sample_id, t, oracle_digest);
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CACHE_MAGIC)?;
        let (c, h, w) = soft.scores.dim();
        out.write_u32::<LittleEndian>(c as u32)?;
        out.write_u32::<LittleEndian>(h as u32)?;
        out.write_u32::<LittleEndian>(w as u32)?;
        for v in soft.scores.iter() {
            out.write_u16::<LittleEndian>((v * 65535.0).round() as u16)?;
        }
        for &v in hard.labels.iter() {
            out.write_all(&[if v == IGNORE { 255 } else { v as u8 }])?;
        }
        Ok(())
    }

    pub fn load(
        &self,
        sample_id: &str,
        t: usize,
        oracle_digest: &str,
    ) -> Result<Option<(LabelMap, HardLabelMap)>> {
        let path = self.path(sample_id, t, oracle_digest);
        if !path.exists() {
            return Ok(None);
        }
        let mut input = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::validation("pseudo cache: bad magic"));
        }
        let c = input.read_u32::<LittleEndian>()? as usize;
        let h = input.read_u32::<LittleEndian>()? as usize;
        let w = input.read_u32::<LittleEndian>()? as usize;
        let mut soft = Array3::<f64>::zeros((c, h, w));
        for v in soft.iter_mut() {
            *v = input.read_u16::<LittleEndian>()? as f64 / 65535.0;
        }
        let mut hard = Array2::<i32>::zeros((h, w));
        let mut byte = [0u8; 1];
        for v in hard.iter_mut() {
            input.read_exact(&mut byte)?;
            *v = if byte[0] == 255 { IGNORE } else { byte[0] as i32 };
        }
        Ok(Some((LabelMap::probabilities(soft)?, HardLabelMap::new(hard))))
    }
}
