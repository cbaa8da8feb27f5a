//! The full training loss suite and its analytic gradients.
//!
//! Six terms feed two weighted totals:
//!
//! ```text
//! L_wsss    = L_ce_pix + L_bce_img + alpha1 * L_bce_pix + alpha2 * L_contrastive
//! L_ci_wsss = L_wsss + beta1 * L_kd + beta2 * L_bce_loc
//! ```
//!
//! Every term has a value-only form operating on the spec-level inputs
//! (probability maps, hard maps) and a `*_grad` form that takes raw logits or
//! features and returns `(value, d value / d input)`. The two forms agree on
//! the value; gradients are validated against central finite differences in
//! the test suites.
//!
//! Log arguments are clamped at `EPS_LOG` so exact zeros and ones stay finite.

use crate::error::{Error, Result};
use crate::types::{HardLabelMap, LabelMap, MapKind, IGNORE};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Clamp applied inside every logarithm.
pub const EPS_LOG: f64 = 1e-12;

#[inline]
fn ln_clamped(x: f64) -> f64 {
    x.max(EPS_LOG).ln()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar weights balancing the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        // initial-task defaults; incremental scenarios override per config
        Self { alpha1: 1.0, alpha2: 0.1, beta1: 0.0, beta2: 0.0 }
    }
}

/// Pixel sampling policy for the dense contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSamplingConfig {
    pub samples_per_class: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ContrastiveSamplingConfig {
    fn default() -> Self {
        Self { samples_per_class: 16, temperature: 0.1, seed: 0 }
    }
}

impl ContrastiveSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class < 1 {
            return Err(Error::validation("samples_per_class must be >= 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::validation("temperature must be finite and > 0"));
        }
        Ok(())
    }
}

/// Internals of the image-level pooling loss: normalized global weighted
/// pooling plus a focal penalty on the spatial mean mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    /// Denominator guard in the weighted pooling.
    pub epsilon: f64,
    /// Focal exponent q.
    pub focal_q: f64,
    /// Focal log offset lambda.
    pub focal_lambda: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, focal_q: 3.0, focal_lambda: 0.01 }
    }
}

// ── pixel-wise multi-class cross-entropy ───────────────────────────────────

/// Mean negative log-probability of each pixel's hard label.
///
/// IGNORE pixels are skipped and the mean is taken over the scored pixels
/// only, so the loss scale does not depend on how much of the image carries
/// labels.
pub fn loss_ce_pix(cls_probs: &LabelMap, hard: &HardLabelMap) -> Result<f64> {
    if cls_probs.kind != MapKind::Probabilities {
        return Err(Error::validation("loss_ce_pix expects a probability map"));
    }
    let (c, h, w) = cls_probs.scores.dim();
    if (hard.height(), hard.width()) != (h, w) {
        return Err(Error::validation("loss_ce_pix: hard map shape mismatch"));
    }
    hard.validate(c)?;
    let mut sum = 0.0;
    let mut scored = 0usize;
    for y in 0..h {
        for x in 0..w {
            let label = hard.labels[[y, x]];
            if label == IGNORE {
                continue;
            }
            sum -= ln_clamped(cls_probs.scores[[label as usize, y, x]]);
            scored += 1;
        }
    }
    if scored == 0 {
        return Ok(0.0);
    }
    Ok(sum / scored as f64)
}

/// Fused softmax + cross-entropy on decoder logits.
///
/// Returns the loss and its gradient with respect to the logits:
/// `(softmax - onehot(label)) / scored` on scored pixels, zero on IGNORE.
pub fn ce_pix_grad(dec_logits: &Array3<f64>, hard: &HardLabelMap) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = dec_logits.dim();
    if (hard.height(), hard.width()) != (h, w) {
        return Err(Error::validation("ce_pix_grad: hard map shape mismatch"));
    }
    hard.validate(c)?;
    let scored = hard.labels.iter().filter(|&&v| v != IGNORE).count();
    let mut grad = Array3::<f64>::zeros((c, h, w));
    if scored == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / scored as f64;
    let mut loss = 0.0;
    let mut p = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let label = hard.labels[[y, x]];
            if label == IGNORE {
                continue;
            }
            let mut maxv = f64::NEG_INFINITY;
            for k in 0..c {
                maxv = maxv.max(dec_logits[[k, y, x]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                p[k] = (dec_logits[[k, y, x]] - maxv).exp();
                z += p[k];
            }
            let label = label as usize;
            loss -= ((dec_logits[[label, y, x]] - maxv) - z.ln()) * inv;
            for k in 0..c {
                let pk = p[k] / z;
                grad[[k, y, x]] = (pk - if k == label { 1.0 } else { 0.0 }) * inv;
            }
        }
    }
    Ok((loss, grad))
}

// ── pixel-wise binary cross-entropy against soft targets ───────────────────

/// Per-channel binary cross-entropy between sigmoid probabilities and the
/// soft pseudo-label map, averaged over `H * W` (not over channels).
pub fn loss_bce_pix(cls_probs_sigmoid: &LabelMap, soft: &LabelMap) -> Result<f64> {
    if cls_probs_sigmoid.kind != MapKind::Probabilities || soft.kind != MapKind::Probabilities {
        return Err(Error::validation("loss_bce_pix expects probability maps"));
    }
    if cls_probs_sigmoid.scores.dim() != soft.scores.dim() {
        return Err(Error::validation("loss_bce_pix: shape mismatch"));
    }
    let (_, h, w) = soft.scores.dim();
    let mut sum = 0.0;
    for (p, t) in cls_probs_sigmoid.scores.iter().zip(soft.scores.iter()) {
        sum -= t * ln_clamped(*p) + (1.0 - t) * ln_clamped(1.0 - *p);
    }
    Ok(sum / (h * w) as f64)
}

/// Fused sigmoid + binary cross-entropy on decoder logits.
///
/// Gradient with respect to the logits is `(sigmoid(l) - target) / (H * W)`.
pub fn bce_pix_grad(dec_logits: &Array3<f64>, soft: &LabelMap) -> Result<(f64, Array3<f64>)> {
    if soft.kind != MapKind::Probabilities {
        return Err(Error::validation("bce_pix_grad expects a probability target"));
    }
    if dec_logits.dim() != soft.scores.dim() {
        return Err(Error::validation("bce_pix_grad: shape mismatch"));
    }
    let (c, h, w) = dec_logits.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    let mut loss = 0.0;
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let l = dec_logits[[k, y, x]];
                let t = soft.scores[[k, y, x]];
                let p = sigmoid(l);
                // stable BCE-with-logits: max(l,0) - l*t + ln(1 + e^{-|l|})
                loss += (l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()) * inv;
                grad[[k, y, x]] = (p - t) * inv;
            }
        }
    }
    Ok((loss, grad))
}

// ── dense pixel contrastive loss ────────────────────────────────────────────

struct SampledPixel {
    class: i32,
    pos: (usize, usize),
}

/// Seeded without-replacement pixel sampling per class present in `hard`.
/// Sampling depends only on the hard map and the seed, never on features.
fn sample_pixels(hard: &HardLabelMap, cfg: &ContrastiveSamplingConfig) -> Vec<SampledPixel> {
    let mut by_class: std::collections::BTreeMap<i32, Vec<(usize, usize)>> =
        std::collections::BTreeMap::new();
    let (h, w) = hard.labels.dim();
    for y in 0..h {
        for x in 0..w {
            let v = hard.labels[[y, x]];
            if v != IGNORE {
                by_class.entry(v).or_default().push((y, x));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for (class, pixels) in by_class {
        let take = cfg.samples_per_class.min(pixels.len());
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, pixels.len(), take).into_vec();
        chosen.sort_unstable();
        for idx in chosen {
            out.push(SampledPixel { class, pos: pixels[idx] });
        }
    }
    out
}

/// Dense InfoNCE over sampled pixel features.
///
/// Features are L2-normalized per pixel before dot products. Each anchor pixel
/// contributes one log term per positive; negatives (all sampled pixels of
/// other classes) are shared across the anchor's terms. Classes that end up
/// with fewer than two sampled pixels cannot form positive pairs and are
/// excluded; when no class participates the loss is zero and the returned
/// flag is set.
pub fn loss_contrastive(
    features: &Array3<f64>,
    hard: &HardLabelMap,
    cfg: &ContrastiveSamplingConfig,
) -> Result<(f64, bool)> {
    let (value, _, degenerate) = contrastive_grad(features, hard, cfg)?;
    Ok((value, degenerate))
}

/// Contrastive loss plus gradient with respect to the (raw) features,
/// back-propagated through the per-pixel L2 normalization.
pub fn contrastive_grad(
    features: &Array3<f64>,
    hard: &HardLabelMap,
    cfg: &ContrastiveSamplingConfig,
) -> Result<(f64, Array3<f64>, bool)> {
    cfg.validate()?;
    let (d, h, w) = features.dim();
    if (hard.height(), hard.width()) != (h, w) {
        return Err(Error::validation("contrastive: hard map shape mismatch"));
    }
    let mut grad = Array3::<f64>::zeros((d, h, w));
    let sampled = sample_pixels(hard, cfg);
    let m = sampled.len();

    // per-class sample counts decide participation
    let mut counts: std::collections::BTreeMap<i32, usize> = std::collections::BTreeMap::new();
    for s in &sampled {
        *counts.entry(s.class).or_default() += 1;
    }
    let participating: Vec<i32> =
        counts.iter().filter(|(_, &n)| n >= 2).map(|(&c, _)| c).collect();
    if participating.is_empty() {
        return Ok((0.0, grad, true));
    }

    // normalized feature vectors and norms for every sampled pixel
    let mut unit = Array2::<f64>::zeros((m, d));
    let mut norms = Array1::<f64>::zeros(m);
    for (j, s) in sampled.iter().enumerate() {
        let (y, x) = s.pos;
        let mut sq = 0.0;
        for k in 0..d {
            sq += features[[k, y, x]] * features[[k, y, x]];
        }
        let n = sq.sqrt().max(1e-12);
        norms[j] = n;
        for k in 0..d {
            unit[[j, k]] = features[[k, y, x]] / n;
        }
    }
    let sim = |a: usize, b: usize| -> f64 { (0..d).map(|k| unit[[a, k]] * unit[[b, k]]).sum() };

    let tau = cfg.temperature;
    let inv_classes = 1.0 / participating.len() as f64;
    let mut loss = 0.0;
    // d loss / d sim[j][k], accumulated over every log term
    let mut gsim = Array2::<f64>::zeros((m, m));

    for &class in &participating {
        let anchors: Vec<usize> = (0..m).filter(|&j| sampled[j].class == class).collect();
        let negatives: Vec<usize> = (0..m).filter(|&j| sampled[j].class != class).collect();
        let inv_sc = 1.0 / anchors.len() as f64;
        for &i in &anchors {
            let inv_pi = 1.0 / (anchors.len() - 1) as f64;
            // negative exponents are shared across this anchor's positives
            let negs: Vec<f64> = negatives.iter().map(|&n| sim(i, n) / tau).collect();
            for &p in &anchors {
                if p == i {
                    continue;
                }
                let a = sim(i, p) / tau;
                let maxv = negs.iter().fold(a, |acc, &b| acc.max(b));
                let ea = (a - maxv).exp();
                let mut z = ea;
                for &b in &negs {
                    z += (b - maxv).exp();
                }
                let term = (a - maxv) - z.ln();
                let weight = inv_classes * inv_sc * inv_pi;
                loss -= weight * term;
                // d(-term)/da = -(1 - ea/z); d(-term)/db_n = e^{b_n}/z
                gsim[[i, p]] += weight * (ea / z - 1.0) / tau;
                for (ni, &n) in negatives.iter().enumerate() {
                    gsim[[i, n]] += weight * ((negs[ni] - maxv).exp() / z) / tau;
                }
            }
        }
    }

    // gsim -> gradient on unit vectors -> gradient on raw features
    let mut gunit = Array2::<f64>::zeros((m, d));
    for i in 0..m {
        for j in 0..m {
            let g = gsim[[i, j]];
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                gunit[[i, k]] += g * unit[[j, k]];
                gunit[[j, k]] += g * unit[[i, k]];
            }
        }
    }
    for (j, s) in sampled.iter().enumerate() {
        let (y, x) = s.pos;
        let dot: f64 = (0..d).map(|k| gunit[[j, k]] * unit[[j, k]]).sum();
        for k in 0..d {
            grad[[k, y, x]] += (gunit[[j, k]] - dot * unit[[j, k]]) / norms[j];
        }
    }
    Ok((loss, grad, false))
}

// ── image-level classification loss over localizer output ──────────────────

fn pooled_logit_terms(
    loc_logits: &Array3<f64>,
    cfg: &PoolingConfig,
) -> (Vec<f64>, Array3<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = loc_logits.dim();
    let hw = (h * w) as f64;
    let mut m = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut maxv = f64::NEG_INFINITY;
            for k in 0..c {
                maxv = maxv.max(loc_logits[[k, y, x]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (loc_logits[[k, y, x]] - maxv).exp();
                m[[k, y, x]] = e;
                z += e;
            }
            for k in 0..c {
                m[[k, y, x]] /= z;
            }
        }
    }
    let mut num = vec![0.0f64; c];
    let mut den = vec![0.0f64; c];
    let mut mbar = vec![0.0f64; c];
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                num[k] += m[[k, y, x]] * loc_logits[[k, y, x]];
                den[k] += m[[k, y, x]];
            }
        }
        mbar[k] = den[k] / hw;
    }
    let z: Vec<f64> = (0..c)
        .map(|k| {
            let ngwp = num[k] / (cfg.epsilon + den[k]);
            let foc = (1.0 - mbar[k]).powf(cfg.focal_q) * (cfg.focal_lambda + mbar[k]).ln();
            ngwp + foc
        })
        .collect();
    (z, m, num, den, mbar)
}

/// Image-level binary cross-entropy on pooled localizer scores.
///
/// Per class, the pooled logit is normalized global weighted pooling of the
/// logits (weighted by the pixel-wise softmax mask) plus a focal penalty on
/// the mask's spatial mean; the sigmoid of that sum is scored against the
/// image-level label. Summed over classes, as in the image-classification
/// head this follows.
///
/// `present` marks which of the channels carry a positive image-level label
/// and must align with the channel order of `loc_logits` (the caller slices
/// the localizer output down to the classes with image-level supervision).
pub fn loss_bce_img(loc_logits: &LabelMap, present: &[bool], cfg: &PoolingConfig) -> Result<f64> {
    if loc_logits.kind != MapKind::Logits {
        return Err(Error::validation("loss_bce_img expects logits"));
    }
    if present.len() != loc_logits.num_classes() {
        return Err(Error::validation("loss_bce_img: label vector/channel mismatch"));
    }
    let (z, ..) = pooled_logit_terms(&loc_logits.scores, cfg);
    let mut loss = 0.0;
    for (k, &zk) in z.iter().enumerate() {
        let p = sigmoid(zk);
        loss -= if present[k] { ln_clamped(p) } else { ln_clamped(1.0 - p) };
    }
    Ok(loss)
}

/// Image-level BCE plus gradient with respect to the localizer logits,
/// back-propagated through the pooling, the focal penalty, and the softmax
/// mask.
pub fn bce_img_grad(
    loc_logits: &Array3<f64>,
    present: &[bool],
    cfg: &PoolingConfig,
) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = loc_logits.dim();
    if present.len() != c {
        return Err(Error::validation("bce_img_grad: label vector/channel mismatch"));
    }
    let hw = (h * w) as f64;
    let (z, m, num, den, mbar) = pooled_logit_terms(loc_logits, cfg);

    let mut loss = 0.0;
    // dL/dz_c = sigmoid(z_c) - y_c, and the focal chain dz_c/dmbar_c
    let mut gz = vec![0.0f64; c];
    let mut dfoc_dmbar = vec![0.0f64; c];
    for k in 0..c {
        let zk = z[k];
        let y = if present[k] { 1.0 } else { 0.0 };
        loss += zk.max(0.0) - zk * y + (-zk.abs()).exp().ln_1p();
        gz[k] = sigmoid(zk) - y;
        let om = 1.0 - mbar[k];
        dfoc_dmbar[k] = -cfg.focal_q * om.powf(cfg.focal_q - 1.0) * (cfg.focal_lambda + mbar[k]).ln()
            + om.powf(cfg.focal_q) / (cfg.focal_lambda + mbar[k]);
    }

    let mut grad = Array3::<f64>::zeros((c, h, w));
    for y0 in 0..h {
        for x0 in 0..w {
            for kk in 0..c {
                // derivative of every pooled term through logit s[kk] at this pixel
                let mkk = m[[kk, y0, x0]];
                let mut g = 0.0;
                for cc in 0..c {
                    let mcc = m[[cc, y0, x0]];
                    let dmask = mcc * (if cc == kk { 1.0 } else { 0.0 } - mkk);
                    let dn = cfg.epsilon + den[cc];
                    // nGWP path: direct logit term plus mask movement
                    let mut dz = (if cc == kk { mcc } else { 0.0 }
                        + loc_logits[[cc, y0, x0]] * dmask)
                        / dn
                        - num[cc] * dmask / (dn * dn);
                    // focal path via the spatial mean mask
                    dz += dfoc_dmbar[cc] * dmask / hw;
                    g += gz[cc] * dz;
                }
                grad[[kk, y0, x0]] = g;
            }
        }
    }
    Ok((loss, grad))
}

// ── knowledge distillation on encoder features ──────────────────────────────

/// Squared L2 distance between current and frozen feature maps.
///
/// Averaged per element by default so the weight transfers across feature
/// sizes; pass `normalize = false` for the raw summed squared norm.
pub fn loss_kd(feat_t: &Array3<f64>, feat_prev: &Array3<f64>, normalize: bool) -> Result<f64> {
    if feat_t.dim() != feat_prev.dim() {
        return Err(Error::validation("loss_kd: feature shape mismatch"));
    }
    let sum: f64 = feat_t
        .iter()
        .zip(feat_prev.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(if normalize { sum / feat_t.len() as f64 } else { sum })
}

/// KD loss plus gradient with respect to the current features.
pub fn kd_grad(
    feat_t: &Array3<f64>,
    feat_prev: &Array3<f64>,
    normalize: bool,
) -> Result<(f64, Array3<f64>)> {
    let value = loss_kd(feat_t, feat_prev, normalize)?;
    let scale = if normalize { 2.0 / feat_t.len() as f64 } else { 2.0 };
    let grad = (feat_t - feat_prev) * scale;
    Ok((value, grad))
}

// ── localizer transfer loss from the frozen previous network ───────────────

/// Binary cross-entropy between the frozen previous decoder's sigmoid outputs
/// (soft targets) and the sigmoid of the first `|C_prev|` channels of the
/// current localizer, averaged over `H * W`.
pub fn loss_bce_loc(prev_cls_logits: &LabelMap, loc_logits: &LabelMap) -> Result<f64> {
    let (value, _) = bce_loc_inner(&prev_cls_logits.scores, &loc_logits.scores, false)?;
    Ok(value)
}

/// Transfer loss plus gradient with respect to the current localizer logits.
/// Channels beyond the previous class count receive zero gradient.
pub fn bce_loc_grad(
    prev_cls_logits: &Array3<f64>,
    loc_logits: &Array3<f64>,
) -> Result<(f64, Array3<f64>)> {
    let (value, grad) = bce_loc_inner(prev_cls_logits, loc_logits, true)?;
    Ok((value, grad.expect("gradient requested")))
}

fn bce_loc_inner(
    prev: &Array3<f64>,
    loc: &Array3<f64>,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    let (cp, h, w) = prev.dim();
    let (cl, hl, wl) = loc.dim();
    if cp > cl {
        return Err(Error::validation(format!(
            "loss_bce_loc: previous network has {cp} channels but localizer only {cl}"
        )));
    }
    if (h, w) != (hl, wl) {
        return Err(Error::validation("loss_bce_loc: spatial shape mismatch"));
    }
    let inv = 1.0 / (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { Some(Array3::<f64>::zeros((cl, h, w))) } else { None };
    for k in 0..cp {
        for y in 0..h {
            for x in 0..w {
                let t = sigmoid(prev[[k, y, x]]);
                let l = loc[[k, y, x]];
                loss += (l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()) * inv;
                if let Some(g) = grad.as_mut() {
                    g[[k, y, x]] = (sigmoid(l) - t) * inv;
                }
            }
        }
    }
    Ok((loss, grad))
}

// ── weighted totals ─────────────────────────────────────────────────────────

/// Scalar values of the four initial-task loss terms.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct WsssParts {
    pub ce_pix: f64,
    pub bce_img: f64,
    pub bce_pix: f64,
    pub contrastive: f64,
}

/// Scalar values of all six loss terms at an incremental task.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CiWsssParts {
    pub wsss: WsssParts,
    pub kd: f64,
    pub bce_loc: f64,
}

pub fn total_wsss(parts: &WsssParts, w: &LossWeights) -> f64 {
    parts.ce_pix + parts.bce_img + w.alpha1 * parts.bce_pix + w.alpha2 * parts.contrastive
}

pub fn total_ci_wsss(parts: &CiWsssParts, w: &LossWeights) -> f64 {
    total_wsss(&parts.wsss, w) + w.beta1 * parts.kd + w.beta2 * parts.bce_loc
}
