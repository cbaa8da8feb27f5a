//! The trainable segmentation network: a shared convolutional encoder feeding
//! a decoder head (dense class logits, the inference path) and a localizer
//! head (dense class logits used only to build pseudo-labels during training).
//!
//! Heads end in a per-row 1x1 convolution so that extending the class count
//! appends output channels without perturbing existing ones.

use crate::error::{Error, Result};
use crate::layers::{gaussian, upsample_bilinear, upsample_bilinear_backward, Conv2d, ConvGrad};
use crate::types::{HardLabelMap, Image};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Bias for freshly appended head channels: sigmoid(bias) ~= 0.01, so new
/// classes start nearly silent instead of flooding early pseudo-labels.
pub const NEW_HEAD_BIAS: f64 = -4.59511985013459;

/// Architecture knobs. Depths are fixed (four encoder convolutions with two
/// stride-2 stages, a one-conv decoder trunk, a three-conv localizer); widths
/// are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub feature_channels: usize,
    pub decoder_hidden: usize,
    pub localizer_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { feature_channels: 32, decoder_hidden: 32, localizer_hidden: 64 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels < 2 || self.decoder_hidden < 1 || self.localizer_hidden < 1 {
            return Err(Error::validation("network widths must be positive"));
        }
        Ok(())
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: Array3<f64>,
    pub decoder_logits: Array3<f64>,
    pub localizer_logits: Array3<f64>,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    input: Array3<f64>,
    encoder_acts: Vec<Array3<f64>>,
    decoder_acts: Vec<Array3<f64>>,
    localizer_acts: Vec<Array3<f64>>,
    pub output: ForwardOutput,
}

/// Gradients for every parameter, in the same order as [`SegNet::layers`].
pub struct NetGrads {
    pub encoder: Vec<ConvGrad>,
    pub decoder: Vec<ConvGrad>,
    pub localizer: Vec<ConvGrad>,
}

impl NetGrads {
    pub fn scale(&mut self, factor: f64) {
        for g in self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.localizer.iter_mut())
        {
            g.weight.mapv_inplace(|v| v * factor);
            g.bias.mapv_inplace(|v| v * factor);
        }
    }

    /// Flattened gradient vector aligned with [`SegNet::param_vector`].
    pub fn grad_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.encoder.iter().chain(self.decoder.iter()).chain(self.localizer.iter()) {
            out.extend(g.weight.iter());
            out.extend(g.bias.iter());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: NetConfig,
    class_count: usize,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    localizer: Vec<Conv2d>,
    rng: ChaCha8Rng,
}

impl SegNet {
    pub fn new(cfg: NetConfig, class_count: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if class_count < 2 {
            return Err(Error::validation("network needs at least background + 1 class"));
        }
        let d = cfg.feature_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = vec![
            Conv2d::new(&mut rng, 3, d / 2, 3, 1, true, false),
            Conv2d::new(&mut rng, d / 2, d, 3, 2, true, false),
            Conv2d::new(&mut rng, d, d, 3, 1, true, false),
            Conv2d::new(&mut rng, d, d, 3, 2, true, false),
        ];
        let decoder = vec![
            Conv2d::new(&mut rng, d, cfg.decoder_hidden, 3, 1, true, false),
            Conv2d::new(&mut rng, cfg.decoder_hidden, class_count, 1, 1, false, true),
        ];
        let localizer = vec![
            Conv2d::new(&mut rng, d, cfg.localizer_hidden, 3, 1, true, false),
            Conv2d::new(&mut rng, cfg.localizer_hidden, cfg.localizer_hidden, 3, 1, true, false),
            Conv2d::new(&mut rng, cfg.localizer_hidden, class_count, 1, 1, false, true),
        ];
        Ok(Self { cfg, class_count, encoder, decoder, localizer, rng })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_input(pixels: &Array3<f64>) -> Result<()> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::validation("network input must have 3 channels"));
        }
        if !(8..=1024).contains(&h) || !(8..=1024).contains(&w) {
            return Err(Error::validation(format!(
                "input {h}x{w} outside supported bounds 8..=1024"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<ForwardOutput> {
        Ok(self.forward_cached(&image.pixels)?.output)
    }

    pub fn forward_cached(&self, pixels: &Array3<f64>) -> Result<ForwardCache> {
        Self::check_input(pixels)?;
        let (_, h, w) = pixels.dim();

        let mut encoder_acts = Vec::with_capacity(self.encoder.len());
        let mut cur = pixels.clone();
        for layer in &self.encoder {
            cur = layer.forward(&cur);
            encoder_acts.push(cur.clone());
        }
        let features = cur;

        let mut decoder_acts = Vec::with_capacity(self.decoder.len());
        let mut cur = features.clone();
        for layer in &self.decoder {
            cur = layer.forward(&cur);
            decoder_acts.push(cur.clone());
        }
        let decoder_logits = upsample_bilinear(&cur, h, w);

        let mut localizer_acts = Vec::with_capacity(self.localizer.len());
        let mut cur = features.clone();
        for layer in &self.localizer {
            cur = layer.forward(&cur);
            localizer_acts.push(cur.clone());
        }
        let localizer_logits = upsample_bilinear(&cur, h, w);

        Ok(ForwardCache {
            input: pixels.clone(),
            encoder_acts,
            decoder_acts,
            localizer_acts,
            output: ForwardOutput { features, decoder_logits, localizer_logits },
        })
    }

    /// Per-pixel argmax of the decoder logits (ties to the lowest index) —
    /// the inference path.
    pub fn predict_hard(&self, image: &Image) -> Result<HardLabelMap> {
        let out = self.forward(image)?;
        Ok(argmax_channels(&out.decoder_logits))
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            encoder: self.encoder.iter().map(|l| l.zero_grad()).collect(),
            decoder: self.decoder.iter().map(|l| l.zero_grad()).collect(),
            localizer: self.localizer.iter().map(|l| l.zero_grad()).collect(),
        }
    }

    /// Accumulates parameter gradients for one sample given the upstream
    /// gradients on the decoder logits, localizer logits, and encoder
    /// features (the feature term collects the contrastive and distillation
    /// contributions).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_decoder_logits: &Array3<f64>,
        grad_localizer_logits: &Array3<f64>,
        grad_features: &Array3<f64>,
        grads: &mut NetGrads,
    ) {
        let feat = &cache.output.features;
        let (_, fh, fw) = feat.dim();

        let mut gfeat = grad_features.clone();

        // decoder head
        let mut g = upsample_bilinear_backward(grad_decoder_logits, cache.decoder_acts.last().unwrap().dim().1, cache.decoder_acts.last().unwrap().dim().2);
        for (i, layer) in self.decoder.iter().enumerate().rev() {
            let input = if i == 0 { feat } else { &cache.decoder_acts[i - 1] };
            g = layer.backward(input, &cache.decoder_acts[i], &g, &mut grads.decoder[i]);
        }
        gfeat += &g;

        // localizer head
        let mut g = upsample_bilinear_backward(grad_localizer_logits, cache.localizer_acts.last().unwrap().dim().1, cache.localizer_acts.last().unwrap().dim().2);
        for (i, layer) in self.localizer.iter().enumerate().rev() {
            let input = if i == 0 { feat } else { &cache.localizer_acts[i - 1] };
            g = layer.backward(input, &cache.localizer_acts[i], &g, &mut grads.localizer[i]);
        }
        gfeat += &g;

        debug_assert_eq!(gfeat.dim(), (feat.dim().0, fh, fw));

        // encoder
        let mut g = gfeat;
        for (i, layer) in self.encoder.iter().enumerate().rev() {
            let input = if i == 0 { &cache.input } else { &cache.encoder_acts[i - 1] };
            g = layer.backward(input, &cache.encoder_acts[i], &g, &mut grads.encoder[i]);
        }
    }

    /// Appends output channels to both heads. Existing channel parameters are
    /// copied verbatim; new channels get small random weights and a bias that
    /// keeps their initial sigmoid near 0.01.
    pub fn extend_heads(&mut self, new_class_count: usize) -> Result<()> {
        if new_class_count <= self.class_count {
            return Err(Error::validation(format!(
                "extend_heads: new class count {new_class_count} must exceed {}",
                self.class_count
            )));
        }
        let old = self.class_count;
        extend_head_conv(self.decoder.last_mut().unwrap(), old, new_class_count, &mut self.rng);
        extend_head_conv(self.localizer.last_mut().unwrap(), old, new_class_count, &mut self.rng);
        self.class_count = new_class_count;
        Ok(())
    }

    /// An inference-only deep copy, decoupled from any further training of
    /// this network.
    pub fn freeze(&self) -> FrozenSegNet {
        FrozenSegNet { net: self.clone() }
    }

    pub(crate) fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.encoder.iter().chain(self.decoder.iter()).chain(self.localizer.iter())
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .chain(self.localizer.iter_mut())
    }

    /// Flattened parameter vector (used by checkpointing and gradient tests).
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_param_vector(&mut self, values: &[f64]) -> Result<()> {
        let mut pos = 0;
        for layer in self.layers_mut() {
            for v in layer.weight.iter_mut() {
                *v = values[pos];
                pos += 1;
            }
            for v in layer.bias.iter_mut() {
                *v = values[pos];
                pos += 1;
            }
        }
        if pos != values.len() {
            return Err(Error::validation("parameter vector length mismatch"));
        }
        Ok(())
    }

    pub(crate) fn rng_state(&self) -> (u64, [u8; 32]) {
        (self.rng.get_word_pos() as u64, self.rng.get_seed())
    }

    pub(crate) fn restore_rng(&mut self, word_pos: u64, seed: [u8; 32]) {
        self.rng = ChaCha8Rng::from_seed(seed);
        self.rng.set_word_pos(word_pos as u128);
    }
}

fn extend_head_conv(conv: &mut Conv2d, old: usize, new: usize, rng: &mut ChaCha8Rng) {
    let (_, cin, kh, kw) = conv.weight.dim();
    let mut weight = ndarray::Array4::<f64>::zeros((new, cin, kh, kw));
    weight.slice_mut(ndarray::s![..old, .., .., ..]).assign(&conv.weight);
    for o in old..new {
        for i in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    weight[[o, i, ky, kx]] = gaussian(rng) * 0.01;
                }
            }
        }
    }
    let mut bias = ndarray::Array1::<f64>::zeros(new);
    bias.slice_mut(ndarray::s![..old]).assign(&conv.bias);
    for o in old..new {
        bias[o] = NEW_HEAD_BIAS;
    }
    conv.weight = weight;
    conv.bias = bias;
}

/// Channel-axis argmax with ties broken toward the lowest index.
pub fn argmax_channels(logits: &Array3<f64>) -> HardLabelMap {
    let (c, h, w) = logits.dim();
    let mut labels = Array2::<i32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[[0, y, x]];
            for k in 1..c {
                if logits[[k, y, x]] > best_v {
                    best_v = logits[[k, y, x]];
                    best = k;
                }
            }
            labels[[y, x]] = best as i32;
        }
    }
    HardLabelMap::new(labels)
}

/// Immutable snapshot of a trained network.
#[derive(Debug, Clone)]
pub struct FrozenSegNet {
    net: SegNet,
}

impl FrozenSegNet {
    pub fn forward(&self, image: &Image) -> Result<ForwardOutput> {
        self.net.forward(image)
    }

    pub fn forward_pixels(&self, pixels: &Array3<f64>) -> Result<ForwardOutput> {
        Ok(self.net.forward_cached(pixels)?.output)
    }

    pub fn predict_hard(&self, image: &Image) -> Result<HardLabelMap> {
        self.net.predict_hard(image)
    }

    pub fn class_count(&self) -> usize {
        self.net.class_count()
    }
}

/// Plain SGD with momentum. Velocity buffers follow the network's layer
/// order; a fresh optimizer is created at each task boundary.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<(ndarray::Array4<f64>, ndarray::Array1<f64>)>,
}

impl SgdMomentum {
    pub fn new(net: &SegNet, lr: f64, momentum: f64) -> Self {
        let velocity = net
            .layers()
            .map(|l| {
                (
                    ndarray::Array4::zeros(l.weight.dim()),
                    ndarray::Array1::zeros(l.bias.dim()),
                )
            })
            .collect();
        Self { lr, momentum, velocity }
    }

    pub fn step(&mut self, net: &mut SegNet, grads: &NetGrads) {
        let all: Vec<&ConvGrad> = grads
            .encoder
            .iter()
            .chain(grads.decoder.iter())
            .chain(grads.localizer.iter())
            .collect();
        for ((layer, (vw, vb)), g) in net.layers_mut().zip(self.velocity.iter_mut()).zip(all) {
            vw.zip_mut_with(&g.weight, |v, gv| *v = *v * self.momentum + gv);
            vb.zip_mut_with(&g.bias, |v, gv| *v = *v * self.momentum + gv);
            layer.weight.zip_mut_with(vw, |p, v| *p -= self.lr * v);
            layer.bias.zip_mut_with(vb, |p, v| *p -= self.lr * v);
        }
    }

    pub(crate) fn velocity_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.velocity {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((3, h, w), |_| rand::Rng::gen_range(&mut rng, 0.0..1.0));
        Image::new(pixels, format!("img{seed}")).unwrap()
    }

    #[test]
    fn forward_shapes_match_contract() {
        let net = SegNet::new(NetConfig::default(), 4, 0).unwrap();
        let out = net.forward(&image(1, 32, 32)).unwrap();
        assert_eq!(out.decoder_logits.dim(), (4, 32, 32));
        assert_eq!(out.localizer_logits.dim(), (4, 32, 32));
        assert_eq!(out.features.dim(), (32, 8, 8));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = SegNet::new(NetConfig::default(), 3, 7).unwrap();
        let img = image(2, 16, 24);
        let a = net.forward(&img).unwrap();
        let b = net.forward(&img).unwrap();
        assert_eq!(a.decoder_logits, b.decoder_logits);
        assert_eq!(a.localizer_logits, b.localizer_logits);
    }

    #[test]
    fn zeroed_head_weights_give_zero_logits() {
        let mut net = SegNet::new(NetConfig::default(), 3, 7).unwrap();
        for layer in net.layers_mut() {
            if layer.rowwise {
                layer.weight.fill(0.0);
                layer.bias.fill(0.0);
            }
        }
        let out = net.forward(&image(3, 16, 16)).unwrap();
        assert!(out.decoder_logits.iter().all(|v| *v == 0.0));
        assert!(out.localizer_logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn extend_heads_preserves_old_logits_exactly() {
        let mut net = SegNet::new(NetConfig::default(), 16, 11).unwrap();
        let img = image(4, 24, 24);
        let before = net.forward(&img).unwrap();
        net.extend_heads(21).unwrap();
        let after = net.forward(&img).unwrap();
        assert_eq!(after.decoder_logits.dim().0, 21);
        for k in 0..16 {
            for y in 0..24 {
                for x in 0..24 {
                    assert_eq!(
                        before.decoder_logits[[k, y, x]],
                        after.decoder_logits[[k, y, x]],
                        "decoder channel {k} changed"
                    );
                    assert_eq!(
                        before.localizer_logits[[k, y, x]],
                        after.localizer_logits[[k, y, x]],
                        "localizer channel {k} changed"
                    );
                }
            }
        }
    }

    #[test]
    fn double_extension_matches_single_on_old_channels() {
        let a = SegNet::new(NetConfig::default(), 11, 19).unwrap();
        let mut twice = a.clone();
        twice.extend_heads(16).unwrap();
        twice.extend_heads(21).unwrap();
        let mut once = a.clone();
        once.extend_heads(21).unwrap();
        let img = image(5, 16, 16);
        let o1 = twice.forward(&img).unwrap();
        let o2 = once.forward(&img).unwrap();
        for k in 0..11 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(o1.decoder_logits[[k, y, x]], o2.decoder_logits[[k, y, x]]);
                }
            }
        }
    }

    #[test]
    fn extend_heads_rejects_shrinking() {
        let mut net = SegNet::new(NetConfig::default(), 5, 0).unwrap();
        assert!(net.extend_heads(5).is_err());
        assert!(net.extend_heads(3).is_err());
    }

    #[test]
    fn new_head_channels_start_nearly_silent() {
        let mut net = SegNet::new(NetConfig::default(), 3, 23).unwrap();
        net.extend_heads(5).unwrap();
        let out = net.forward(&image(6, 16, 16)).unwrap();
        for k in 3..5 {
            for y in 0..16 {
                for x in 0..16 {
                    let p = crate::loss::sigmoid(out.decoder_logits[[k, y, x]]);
                    assert!(p < 0.05, "new channel {k} too loud: {p}");
                }
            }
        }
    }

    #[test]
    fn frozen_copy_is_isolated_from_training() {
        let mut net = SegNet::new(NetConfig::default(), 3, 31).unwrap();
        let img = image(7, 16, 16);
        let frozen = net.freeze();
        let before = frozen.forward(&img).unwrap();
        // mutate the live network arbitrarily
        for layer in net.layers_mut() {
            layer.weight.mapv_inplace(|v| v + 0.5);
        }
        let after = frozen.forward(&img).unwrap();
        assert_eq!(before.decoder_logits, after.decoder_logits);
        assert_eq!(before.features, after.features);
    }

    #[test]
    fn param_vector_round_trips() {
        let mut net = SegNet::new(NetConfig::default(), 4, 3).unwrap();
        let v = net.param_vector();
        let mut v2 = v.clone();
        v2[10] += 1.25;
        net.set_param_vector(&v2).unwrap();
        assert_abs_diff_eq!(net.param_vector()[10], v[10] + 1.25, epsilon = 0.0);
    }
}
