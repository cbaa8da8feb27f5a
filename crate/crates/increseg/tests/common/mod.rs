//! Shared test support: independent scalar-summation oracles for every loss
//! and fusion formula, plus central finite-difference gradient checking.
//!
//! The oracles are deliberately plain nested loops written against the
//! formulas directly — they share no code with the implementations they
//! check.

#![allow(dead_code)]

use increseg::types::{HardLabelMap, IGNORE};
use ndarray::{Array2, Array3};

const EPS: f64 = 1e-12;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ln_c(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// Per-pixel softmax by direct summation.
fn softmax_at(logits: &Array3<f64>, y: usize, x: usize) -> Vec<f64> {
    let c = logits.dim().0;
    let maxv = (0..c).map(|k| logits[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = (0..c).map(|k| (logits[[k, y, x]] - maxv).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Normalized entropy weights, one scalar at a time.
pub fn oracle_entropy_weights(logits: &Array3<f64>, norm_classes: usize) -> Array2<f64> {
    let (_, h, w) = logits.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p = softmax_at(logits, y, x);
            let mut entropy = 0.0;
            for pk in &p {
                entropy -= pk * ln_c(*pk);
            }
            out[[y, x]] = (entropy / (norm_classes as f64).ln()).clamp(0.0, 1.0);
        }
    }
    out
}

/// Pixel-wise weighted summation of oracle masks and localizer sigmoids.
pub fn oracle_fuse(fdt: &Array3<f64>, loc: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (c, h, wd) = fdt.dim();
    let mut out = Array3::zeros((c, h, wd));
    for k in 0..c {
        for y in 0..h {
            for x in 0..wd {
                out[[k, y, x]] =
                    w[[y, x]] * fdt[[k, y, x]] + (1.0 - w[[y, x]]) * sig(loc[[k, y, x]]);
            }
        }
    }
    out
}

pub fn oracle_ce_pix(probs: &Array3<f64>, hard: &HardLabelMap) -> f64 {
    let (_, h, w) = probs.dim();
    let mut sum = 0.0;
    let mut n = 0u64;
    for y in 0..h {
        for x in 0..w {
            let label = hard.labels[[y, x]];
            if label == IGNORE {
                continue;
            }
            sum -= ln_c(probs[[label as usize, y, x]]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn oracle_bce_pix(probs: &Array3<f64>, soft: &Array3<f64>) -> f64 {
    let (c, h, w) = probs.dim();
    let mut sum = 0.0;
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = probs[[k, y, x]];
                let t = soft[[k, y, x]];
                sum -= t * ln_c(p) + (1.0 - t) * ln_c(1.0 - p);
            }
        }
    }
    sum / (h * w) as f64
}

/// Full-enumeration contrastive loss. Valid when every class's pixel count is
/// within the per-class sample budget, so sampling selects all pixels and the
/// term structure is fully determined by the hard map.
pub fn oracle_contrastive_full(
    features: &Array3<f64>,
    hard: &HardLabelMap,
    temperature: f64,
) -> f64 {
    let (d, h, w) = features.dim();
    // normalized feature per pixel
    let unit = |y: usize, x: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|k| features[[k, y, x]]).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        for a in v.iter_mut() {
            *a /= n;
        }
        v
    };
    let mut classes: Vec<i32> = hard.labels.iter().cloned().filter(|&v| v != IGNORE).collect();
    classes.sort_unstable();
    classes.dedup();

    let pixels_of = |c: i32| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if hard.labels[[y, x]] == c {
                    out.push((y, x));
                }
            }
        }
        out
    };
    let participating: Vec<i32> =
        classes.iter().cloned().filter(|&c| pixels_of(c).len() >= 2).collect();
    if participating.is_empty() {
        return 0.0;
    }

    let mut loss = 0.0;
    for &c in &participating {
        let anchors = pixels_of(c);
        let mut negatives = Vec::new();
        for &c2 in &classes {
            if c2 != c {
                negatives.extend(pixels_of(c2));
            }
        }
        let mut class_term = 0.0;
        for &(ay, ax) in &anchors {
            let ua = unit(ay, ax);
            let mut anchor_term = 0.0;
            for &(py, px) in &anchors {
                if (py, px) == (ay, ax) {
                    continue;
                }
                let up = unit(py, px);
                let spos: f64 = ua.iter().zip(&up).map(|(a, b)| a * b).sum();
                let mut denom = (spos / temperature).exp();
                for &(ny, nx) in &negatives {
                    let un = unit(ny, nx);
                    let sneg: f64 = ua.iter().zip(&un).map(|(a, b)| a * b).sum();
                    denom += (sneg / temperature).exp();
                }
                anchor_term += ((spos / temperature).exp() / denom).ln();
            }
            class_term += anchor_term / (anchors.len() - 1) as f64;
        }
        loss -= class_term / anchors.len() as f64;
    }
    loss / participating.len() as f64
}

pub fn oracle_bce_img(
    logits: &Array3<f64>,
    present: &[bool],
    epsilon: f64,
    q: f64,
    lambda: f64,
) -> f64 {
    let (c, h, w) = logits.dim();
    let mut loss = 0.0;
    for k in 0..c {
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..h {
            for x in 0..w {
                let m = softmax_at(logits, y, x)[k];
                num += m * logits[[k, y, x]];
                den += m;
            }
        }
        let ngwp = num / (epsilon + den);
        let mbar = den / (h * w) as f64;
        let foc = (1.0 - mbar).powf(q) * (lambda + mbar).ln();
        let p = sig(ngwp + foc);
        loss -= if present[k] { ln_c(p) } else { ln_c(1.0 - p) };
    }
    loss
}

pub fn oracle_kd(a: &Array3<f64>, b: &Array3<f64>, normalize: bool) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        sum += (x - y) * (x - y);
    }
    if normalize {
        sum / a.len() as f64
    } else {
        sum
    }
}

pub fn oracle_bce_loc(prev: &Array3<f64>, loc: &Array3<f64>) -> f64 {
    let (cp, h, w) = prev.dim();
    let mut sum = 0.0;
    for k in 0..cp {
        for y in 0..h {
            for x in 0..w {
                let t = sig(prev[[k, y, x]]);
                let p = sig(loc[[k, y, x]]);
                sum -= t * ln_c(p) + (1.0 - t) * ln_c(1.0 - p);
            }
        }
    }
    sum / (h * w) as f64
}

/// Brute-force per-pixel (gt, pred) tally.
pub fn oracle_confusion(gt: &HardLabelMap, pred: &HardLabelMap, classes: usize) -> Array2<u64> {
    let mut counts = Array2::<u64>::zeros((classes, classes));
    for (&g, &p) in gt.labels.iter().zip(pred.labels.iter()) {
        if g == IGNORE {
            continue;
        }
        counts[[g as usize, p as usize]] += 1;
    }
    counts
}

pub fn oracle_miou(counts: &Array2<u64>, group: &[usize]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in group {
        let tp = counts[[c, c]];
        let row: u64 = counts.row(c).iter().sum();
        let col: u64 = counts.column(c).iter().sum();
        let union = row + col - tp;
        if union > 0 {
            sum += tp as f64 / union as f64;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

// ── finite differences ──────────────────────────────────────────────────────

/// Central finite-difference gradient of a scalar function of a tensor.
pub fn fd_gradient_tensor(
    f: &mut dyn FnMut(&Array3<f64>) -> f64,
    x: &Array3<f64>,
    h: f64,
) -> Array3<f64> {
    let mut grad = Array3::zeros(x.dim());
    let mut x2 = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = x2[idx];
        x2[idx] = orig + h;
        let up = f(&x2);
        x2[idx] = orig - h;
        let down = f(&x2);
        x2[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central finite-difference gradient of a scalar function of a flat vector.
pub fn fd_gradient_vec(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut x2 = x.to_vec();
    for i in 0..x.len() {
        let orig = x2[i];
        x2[i] = orig + h;
        let up = f(&x2);
        x2[i] = orig - h;
        let down = f(&x2);
        x2[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradients: ||a - b|| / max(||a||, ||b||, tiny).
pub fn gradient_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Deterministic pseudo-random tensors for test inputs.
pub fn random_tensor(seed: u64, dim: (usize, usize, usize), lo: f64, hi: f64) -> Array3<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(dim, |_| rng.gen_range(lo..hi))
}

pub fn random_hard(seed: u64, dim: (usize, usize), classes: i32) -> HardLabelMap {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(101));
    HardLabelMap::new(Array2::from_shape_fn(dim, |_| rng.gen_range(0..classes)))
}
