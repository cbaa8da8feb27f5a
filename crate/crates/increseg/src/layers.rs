//! Convolution, ReLU, and bilinear resize primitives with explicit backward
//! passes. Everything is `f64` and single-threaded so runs are bit-for-bit
//! reproducible.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A 2-D convolution layer with optional fused ReLU.
///
/// `rowwise` selects a per-output-channel accumulation path for the head
/// layers: each output row is computed independently with a fixed-order inner
/// loop, so appending channels can never perturb existing channels' outputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>, // (out, in, kh, kw)
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
    pub rowwise: bool,
}

/// Gradient buffers for one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rowwise: bool,
    ) -> Self {
        // He initialization
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight =
            Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| gaussian(rng) * std);
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            pad: kernel / 2,
            relu,
            rowwise,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = input.dim();
        debug_assert_eq!(cin, self.in_channels());
        let (oh, ow) = self.out_spatial(h, w);
        let col = im2col(input, self.weight.dim().2, self.stride, self.pad, oh, ow);
        let cout = self.out_channels();
        let k = col.dim().0;
        let n = col.dim().1;
        let wmat = self
            .weight
            .view()
            .into_shape((cout, k))
            .expect("contiguous weight");
        let mut out_mat = if self.rowwise {
            // fixed-order accumulation per output channel
            let mut out = Array2::<f64>::zeros((cout, n));
            for o in 0..cout {
                for j in 0..n {
                    let mut acc = self.bias[o];
                    for kk in 0..k {
                        acc += wmat[[o, kk]] * col[[kk, j]];
                    }
                    out[[o, j]] = acc;
                }
            }
            out
        } else {
            let mut out = wmat.dot(&col);
            for o in 0..cout {
                for j in 0..n {
                    out[[o, j]] += self.bias[o];
                }
            }
            out
        };
        if self.relu {
            out_mat.mapv_inplace(|v| v.max(0.0));
        }
        out_mat.into_shape((cout, oh, ow)).expect("conv output shape")
    }

    /// Backward pass. `output` is this layer's own forward result (used for
    /// the ReLU mask). Returns the gradient with respect to the input.
    pub fn backward(
        &self,
        input: &Array3<f64>,
        output: &Array3<f64>,
        grad_out: &Array3<f64>,
        grads: &mut ConvGrad,
    ) -> Array3<f64> {
        let (cin, h, w) = input.dim();
        let (cout, oh, ow) = output.dim();
        let kernel = self.weight.dim().2;
        let n = oh * ow;
        let k = cin * kernel * kernel;

        let mut g = grad_out.clone();
        if self.relu {
            for (gv, ov) in g.iter_mut().zip(output.iter()) {
                if *ov <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let gmat = g.into_shape((cout, n)).expect("grad shape");
        let col = im2col(input, kernel, self.stride, self.pad, oh, ow);

        for o in 0..cout {
            let mut b = 0.0;
            for j in 0..n {
                b += gmat[[o, j]];
            }
            grads.bias[o] += b;
        }
        let dw = gmat.dot(&col.t());
        let mut wview = grads
            .weight
            .view_mut()
            .into_shape((cout, k))
            .expect("weight grad shape");
        wview += &dw;

        let wmat = self
            .weight
            .view()
            .into_shape((cout, k))
            .expect("contiguous weight");
        let dcol = wmat.t().dot(&gmat);
        col2im(&dcol, cin, h, w, kernel, self.stride, self.pad, oh, ow)
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }
}

/// Box-Muller standard normal draw.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn im2col(
    input: &Array3<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = input.dim();
    let mut col = Array2::<f64>::zeros((cin * kernel * kernel, oh * ow));
    for c in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = input[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut grad = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad[[c, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    grad
}

/// Bilinear resize of a `(C, h, w)` map to `(C, th, tw)` with half-pixel
/// centre alignment. Per output pixel the four source weights are fixed, so
/// the backward pass is the exact adjoint scatter.
pub fn upsample_bilinear(input: &Array3<f64>, th: usize, tw: usize) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array3::<f64>::zeros((c, th, tw));
    for oy in 0..th {
        let (y0, y1, wy) = src_coords(oy, th, h);
        for ox in 0..tw {
            let (x0, x1, wx) = src_coords(ox, tw, w);
            for ch in 0..c {
                let a = input[[ch, y0, x0]];
                let b = input[[ch, y0, x1]];
                let d = input[[ch, y1, x0]];
                let e = input[[ch, y1, x1]];
                out[[ch, oy, ox]] = (1.0 - wy) * ((1.0 - wx) * a + wx * b)
                    + wy * ((1.0 - wx) * d + wx * e);
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(
    grad_out: &Array3<f64>,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let (c, th, tw) = grad_out.dim();
    let mut grad = Array3::<f64>::zeros((c, h, w));
    for oy in 0..th {
        let (y0, y1, wy) = src_coords(oy, th, h);
        for ox in 0..tw {
            let (x0, x1, wx) = src_coords(ox, tw, w);
            for ch in 0..c {
                let g = grad_out[[ch, oy, ox]];
                grad[[ch, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                grad[[ch, y0, x1]] += (1.0 - wy) * wx * g;
                grad[[ch, y1, x0]] += wy * (1.0 - wx) * g;
                grad[[ch, y1, x1]] += wy * wx * g;
            }
        }
    }
    grad
}

#[inline]
fn src_coords(o: usize, target: usize, source: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) * source as f64 / target as f64 - 0.5;
    let s = s.clamp(0.0, (source - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(source - 1);
    (i0, i1, s - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn conv_rowwise_and_gemm_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(&mut rng, 3, 5, 3, 1, false, false);
        let input = Array3::from_shape_fn((3, 6, 7), |_| gaussian(&mut rng));
        let a = conv.forward(&input);
        conv.rowwise = true;
        let b = conv.forward(&input);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_stride_two_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut rng, 2, 4, 3, 2, true, false);
        let input = Array3::zeros((2, 16, 10));
        assert_eq!(conv.forward(&input).dim(), (4, 8, 5));
        // odd sizes round up
        let input = Array3::zeros((2, 15, 9));
        assert_eq!(conv.forward(&input).dim(), (4, 8, 5));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(&mut rng, 2, 3, 3, 2, true, false);
        let input = Array3::from_shape_fn((2, 5, 5), |_| gaussian(&mut rng));
        let gout = Array3::from_shape_fn((3, 3, 3), |_| gaussian(&mut rng));
        let out = conv.forward(&input);
        let mut grads = conv.zero_grad();
        let gin = conv.backward(&input, &out, &gout, &mut grads);

        let scalar = |c: &Conv2d, inp: &Array3<f64>| -> f64 {
            c.forward(inp).iter().zip(gout.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        // input gradient
        for idx in [(0usize, 0usize, 0usize), (1, 2, 3), (0, 4, 4)] {
            let mut plus = input.clone();
            plus[idx] += h;
            let mut minus = input.clone();
            minus[idx] -= h;
            let fd = (scalar(&conv, &plus) - scalar(&conv, &minus)) / (2.0 * h);
            assert_abs_diff_eq!(gin[idx], fd, epsilon = 1e-6);
        }
        // weight gradient
        for idx in [(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2)] {
            let mut c2 = conv.clone();
            c2.weight[idx] += h;
            let up = scalar(&c2, &input);
            c2.weight[idx] -= 2.0 * h;
            let down = scalar(&c2, &input);
            assert_abs_diff_eq!(grads.weight[idx], (up - down) / (2.0 * h), epsilon = 1e-6);
        }
        // bias gradient
        let mut c2 = conv.clone();
        c2.bias[1] += h;
        let up = scalar(&c2, &input);
        c2.bias[1] -= 2.0 * h;
        let down = scalar(&c2, &input);
        assert_abs_diff_eq!(grads.bias[1], (up - down) / (2.0 * h), epsilon = 1e-6);
    }

    #[test]
    fn upsample_constant_map_stays_constant() {
        let input = Array3::from_elem((2, 3, 3), 0.4);
        let out = upsample_bilinear(&input, 12, 12);
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.4, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsample_backward_is_exact_adjoint() {
        // <Ax, y> == <x, A^T y> for random x, y
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array3::from_shape_fn((2, 4, 5), |_| gaussian(&mut rng));
        let y = Array3::from_shape_fn((2, 9, 11), |_| gaussian(&mut rng));
        let ax = upsample_bilinear(&x, 9, 11);
        let aty = upsample_bilinear_backward(&y, 4, 5);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }
}
