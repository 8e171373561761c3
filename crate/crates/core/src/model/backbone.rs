//! Small strided CNN feature extractor.
//!
//! Activations between layers are stored as [H*W, channels] matrices in
//! row-major spatial order; convolutions run as im2col followed by a matrix
//! product so the hot path stays inside BLAS-style kernels.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) const LEAKY_SLOPE: f64 = 0.01;
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Derivative taken as the positive slope at exactly zero.
pub(crate) fn leaky_relu_grad(pre: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub(crate) fn uniform_signed(fan_in: usize, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) fn conv_output_side(side: usize) -> usize {
    (side + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Unfolds a [H*W, C_in] activation into [OH*OW, C_in*9] patch rows for a
/// 3x3, stride-2, pad-1 convolution.
pub(crate) fn im2col(input: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, usize, usize) {
    let cin = input.ncols();
    let (oh, ow) = (conv_output_side(h), conv_output_side(w));
    let mut cols = Array2::zeros((oh * ow, cin * KERNEL * KERNEL));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..KERNEL {
                let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let spatial = iy as usize * w + ix as usize;
                    for c in 0..cin {
                        cols[(row, c * 9 + ky * KERNEL + kx)] = input[(spatial, c)];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of `im2col`: scatter-adds patch-row gradients back onto the
/// [H*W, C_in] input layout.
pub(crate) fn col2im(dcols: &Array2<f64>, h: usize, w: usize, cin: usize) -> Array2<f64> {
    let (oh, ow) = (conv_output_side(h), conv_output_side(w));
    let mut dinput = Array2::zeros((h * w, cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ky in 0..KERNEL {
                let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let spatial = iy as usize * w + ix as usize;
                    for c in 0..cin {
                        dinput[(spatial, c)] += dcols[(row, c * 9 + ky * KERNEL + kx)];
                    }
                }
            }
        }
    }
    dinput
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ConvLayer {
    /// [C_in*9, C_out]; row index is c_in*9 + ky*3 + kx.
    pub(crate) weight: Array2<f64>,
    pub(crate) bias: Array1<f64>,
}

impl ConvLayer {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * KERNEL * KERNEL;
        let weight =
            Array2::from_shape_vec((fan_in, cout), uniform_signed(fan_in, rng, fan_in * cout))
                .expect("init length matches shape");
        ConvLayer {
            weight,
            bias: Array1::zeros(cout),
        }
    }

    pub(crate) fn in_channels(&self) -> usize {
        self.weight.nrows() / (KERNEL * KERNEL)
    }

    pub(crate) fn out_channels(&self) -> usize {
        self.weight.ncols()
    }
}

/// Per-layer forward caches needed by the backward pass.
#[derive(Debug)]
pub(crate) struct LayerTrace {
    pub(crate) cols: Array2<f64>,
    pub(crate) pre: Array2<f64>,
    pub(crate) in_h: usize,
    pub(crate) in_w: usize,
}

#[derive(Debug)]
pub(crate) struct BackboneTrace {
    pub(crate) layers: Vec<LayerTrace>,
    /// Final post-activation features, [OH*OW, D0].
    pub(crate) features: Array2<f64>,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Backbone {
    pub(crate) layers: Vec<ConvLayer>,
}

impl Backbone {
    pub(crate) fn new(channels: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::config("backbone needs at least one conv layer"));
        }
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for &cout in channels {
            if cout == 0 {
                return Err(Error::config("backbone channel counts must be positive"));
            }
            layers.push(ConvLayer::new(cin, cout, rng));
            cin = cout;
        }
        Ok(Backbone { layers })
    }

    pub(crate) fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").out_channels()
    }

    /// Spatial side after all stride-2 layers.
    #[cfg(test)]
    pub(crate) fn output_side(&self, side: usize) -> usize {
        (0..self.layers.len()).fold(side, |s, _| conv_output_side(s))
    }

    /// `image` is [3, H, W]; the minimum size keeps every layer's output
    /// non-empty.
    pub(crate) fn forward(&self, image: &Array3<f64>) -> Result<BackboneTrace> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::shape("backbone input", "3 channels", format!("{c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "backbone input",
                "at least 2x2 pixels",
                format!("{h}x{w}"),
            ));
        }
        let mut current = Array2::zeros((h * w, 3));
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    current[(y * w + x, ch)] = image[(ch, y, x)];
                }
            }
        }
        let (mut cur_h, mut cur_w) = (h, w);
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (cols, oh, ow) = im2col(&current, cur_h, cur_w);
            let mut pre = cols.dot(&layer.weight);
            for mut row in pre.rows_mut() {
                row += &layer.bias;
            }
            let post = pre.mapv(leaky_relu);
            traces.push(LayerTrace {
                cols,
                pre,
                in_h: cur_h,
                in_w: cur_w,
            });
            current = post;
            cur_h = oh;
            cur_w = ow;
        }
        Ok(BackboneTrace {
            layers: traces,
            features: current,
            out_h: cur_h,
            out_w: cur_w,
        })
    }

    /// Returns per-layer (d_weight, d_bias) in layer order. `d_features` is
    /// the gradient at the final post-activation output.
    pub(crate) fn backward(
        &self,
        trace: &BackboneTrace,
        d_features: &Array2<f64>,
    ) -> Vec<(Array2<f64>, Array1<f64>)> {
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let mut d_post = d_features.clone();
        for (layer, lt) in self.layers.iter().zip(&trace.layers).rev() {
            let d_pre = &d_post * &lt.pre.mapv(leaky_relu_grad);
            let d_weight = lt.cols.t().dot(&d_pre);
            let d_bias = d_pre.sum_axis(ndarray::Axis(0));
            let d_cols = d_pre.dot(&layer.weight.t());
            d_post = col2im(&d_cols, lt.in_h, lt.in_w, layer.in_channels());
            grads.push((d_weight, d_bias));
        }
        grads.reverse();
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_conv(
        input: &Array2<f64>,
        h: usize,
        w: usize,
        layer: &ConvLayer,
    ) -> (Array2<f64>, usize, usize) {
        let cin = layer.in_channels();
        let cout = layer.out_channels();
        let (oh, ow) = (conv_output_side(h), conv_output_side(w));
        let mut out = Array2::zeros((oh * ow, cout));
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = layer.bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let sp = iy as usize * w + ix as usize;
                                acc += input[(sp, ci)] * layer.weight[(ci * 9 + ky * 3 + kx, co)];
                            }
                        }
                    }
                    out[(oy * ow + ox, co)] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn im2col_product_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(h, w) in &[(8usize, 8usize), (7, 9), (5, 5)] {
            let layer = ConvLayer::new(4, 6, &mut rng);
            let input = Array2::from_shape_fn((h * w, 4), |_| rng.gen_range(-1.0..1.0));
            let (cols, oh, ow) = im2col(&input, h, w);
            let mut fast = cols.dot(&layer.weight);
            for mut row in fast.rows_mut() {
                row += &layer.bias;
            }
            let (naive, noh, now) = naive_conv(&input, h, w, &layer);
            assert_eq!((oh, ow), (noh, now));
            for (a, b) in fast.iter().zip(naive.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w, cin) = (6, 5, 3);
        let x = Array2::from_shape_fn((h * w, cin), |_| rng.gen_range(-1.0..1.0));
        let (cols, oh, ow) = im2col(&x, h, w);
        let y = Array2::from_shape_fn((oh * ow, cin * 9), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, h, w, cin);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn spatial_sides_halve_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bb = Backbone::new(&[4, 8, 16], &mut rng).unwrap();
        assert_eq!(bb.output_side(32), 4);
        assert_eq!(bb.output_side(16), 2);
        let image = Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0));
        let trace = bb.forward(&image).unwrap();
        assert_eq!(trace.features.dim(), (16, 16));
        assert_eq!((trace.out_h, trace.out_w), (4, 4));
    }

    #[test]
    fn backward_matches_finite_differences_on_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bb = Backbone::new(&[3, 4], &mut rng).unwrap();
        let image = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-0.5..0.5));
        // Loss = sum of squared features.
        let loss = |bb: &Backbone| {
            let t = bb.forward(&image).unwrap();
            t.features.mapv(|v| v * v).sum()
        };
        let trace = bb.forward(&image).unwrap();
        let d_feat = trace.features.mapv(|v| 2.0 * v);
        let grads = bb.backward(&trace, &d_feat);

        let eps = 1e-6;
        for layer_idx in 0..2 {
            for flat in [0usize, 5, 11] {
                let (r, c) = (
                    flat % bb.layers[layer_idx].weight.nrows(),
                    flat % bb.layers[layer_idx].weight.ncols(),
                );
                let orig = bb.layers[layer_idx].weight[(r, c)];
                bb.layers[layer_idx].weight[(r, c)] = orig + eps;
                let up = loss(&bb);
                bb.layers[layer_idx].weight[(r, c)] = orig - eps;
                let down = loss(&bb);
                bb.layers[layer_idx].weight[(r, c)] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads[layer_idx].0[(r, c)];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                    "layer {layer_idx} ({r},{c}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(Backbone::new(&[], &mut rng).is_err());
        assert!(Backbone::new(&[8, 0], &mut rng).is_err());
        let bb = Backbone::new(&[4], &mut rng).unwrap();
        let flat = Array3::zeros((3, 1, 4));
        assert!(bb.forward(&flat).is_err());
    }
}
