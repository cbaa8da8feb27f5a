//! Foundation-model oracle interface and the deterministic synthetic oracle
//! used in place of a real open-set detector + promptable segmenter pair.
//!
//! The two-stage pipeline (detect boxes from a text prompt, then segment the
//! boxes) collapses to a single contract: class names in, dense per-class
//! masks out. The synthetic implementation answers from the sample's hidden
//! ground-truth mask, optionally degraded by dilation and boundary noise, so
//! pipelines can be tested end-to-end without any model weights.

use crate::error::{Error, Result};
use crate::types::{LabelMap, TrainSample};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Produces dense masks for prompted classes.
///
/// The returned map spans the full accumulated class list (channel order =
/// `accumulated` order); channels of classes not in the prompt are exactly
/// zero. Implementations must be pure given their configuration, so repeated
/// calls with the same inputs return identical maps.
pub trait FoundationOracle: Send + Sync {
    fn generate(
        &self,
        sample: &TrainSample,
        prompt: &[String],
        accumulated: &[String],
    ) -> Result<LabelMap>;

    /// Stable digest of the oracle configuration, used in cache keys.
    fn config_digest(&self) -> String;
}

/// Stand-in oracle that reads the sample's hidden mask.
///
/// Degradation model: each prompted class's true mask is dilated by
/// `dilation_radius`, then boundary noise flips membership independently per
/// pixel with probability `noise_rate` — mask pixels may drop out and pixels
/// on the one-pixel outer ring may leak in. Classes absent from the hidden
/// mask produce empty channels regardless of noise.
///
/// Flips are seeded per (seed, sample id, class name), so outputs do not
/// depend on call order and are safe to generate concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticOracle {
    pub noise_rate: f64,
    pub dilation_radius: usize,
    pub seed: u64,
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        Self { noise_rate: 0.0, dilation_radius: 0, seed: 0 }
    }
}

impl SyntheticOracle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::validation("oracle noise_rate must be in [0, 1]"));
        }
        Ok(())
    }

    fn channel_seed(&self, sample_id: &str, class_name: &str) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(sample_id.as_bytes());
        hasher.update([0]);
        hasher.update(class_name.as_bytes());
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

impl FoundationOracle for SyntheticOracle {
    fn generate(
        &self,
        sample: &TrainSample,
        prompt: &[String],
        accumulated: &[String],
    ) -> Result<LabelMap> {
        self.validate()?;
        let hidden = sample.hidden_mask.as_ref().ok_or_else(|| Error::Oracle {
            sample_id: sample.id().to_string(),
            detail: "sample has no hidden mask for the synthetic oracle".into(),
        })?;
        let (h, w) = hidden.labels.dim();
        let c = accumulated.len();
        let mut scores = Array3::<f64>::zeros((c, h, w));
        for name in prompt {
            let class_idx = accumulated.iter().position(|n| n == name).ok_or_else(|| {
                Error::Oracle {
                    sample_id: sample.id().to_string(),
                    detail: format!("prompted class '{name}' not in the accumulated set"),
                }
            })?;
            if class_idx == 0 {
                return Err(Error::Oracle {
                    sample_id: sample.id().to_string(),
                    detail: "background must not be prompted".into(),
                });
            }
            let mut mask = Array2::<bool>::from_shape_fn((h, w), |(y, x)| {
                hidden.labels[[y, x]] == class_idx as i32
            });
            if self.dilation_radius > 0 {
                mask = dilate(&mask, self.dilation_radius);
            }
            if self.noise_rate > 0.0 && mask.iter().any(|&m| m) {
                let ring = ring_around(&mask);
                let mut rng = ChaCha8Rng::seed_from_u64(self.channel_seed(sample.id(), name));
                for y in 0..h {
                    for x in 0..w {
                        if mask[[y, x]] || ring[[y, x]] {
                            if rng.gen::<f64>() < self.noise_rate {
                                mask[[y, x]] = !mask[[y, x]];
                            }
                        }
                    }
                }
            }
            for y in 0..h {
                for x in 0..w {
                    if mask[[y, x]] {
                        scores[[class_idx, y, x]] = 1.0;
                    }
                }
            }
        }
        LabelMap::probabilities(scores)
    }

    fn config_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"synthetic");
        hasher.update(self.noise_rate.to_bits().to_le_bytes());
        hasher.update((self.dilation_radius as u64).to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        hex16(&hasher.finalize())
    }
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Chebyshev dilation by `radius`.
fn dilate(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -r..=r {
            for dx in -r..=r {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask[[ny as usize, nx as usize]] {
                    return true;
                }
            }
        }
        false
    })
}

/// One-pixel outer boundary ring of a mask.
fn ring_around(mask: &Array2<bool>) -> Array2<bool> {
    let grown = dilate(mask, 1);
    Array2::from_shape_fn(mask.dim(), |(y, x)| grown[[y, x]] && !mask[[y, x]])
}
