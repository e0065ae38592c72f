//! Minimal dense-layer machinery: 3x3 convolutions (im2col + GEMM), linear
//! maps, ReLU, and Adam. Everything is f64 and strictly deterministic so
//! gradients can be validated against central finite differences and runs
//! reproduce bit-for-bit.

use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const KERNEL: usize = 3;
pub const PAD: i64 = 1;

/// 3x3 convolution with padding 1. Weight layout `(cout, cin*9)` so forward
/// and backward are single GEMMs against the im2col matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn init(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Conv2d {
        let fan_in = cin * KERNEL * KERNEL;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_fn((cout, fan_in), |_| dist.sample(rng));
        Conv2d {
            weight,
            bias: Array1::zeros(cout),
            cin,
            cout,
            stride,
        }
    }

    pub fn zeros_like(&self) -> Conv2d {
        Conv2d {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            ..*self
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * PAD as usize - KERNEL) / self.stride + 1,
            (w + 2 * PAD as usize - KERNEL) / self.stride + 1,
        )
    }
}

/// Unfolds `(cin, h, w)` into `(h'*w', cin*9)` patch rows.
pub fn im2col(input: &Array3<f64>, stride: usize) -> Array2<f64> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = (h + 2 * PAD as usize - KERNEL) / stride + 1;
    let ow = (w + 2 * PAD as usize - KERNEL) / stride + 1;
    let mut cols = Array2::zeros((oh * ow, cin * KERNEL * KERNEL));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..cin {
                for ky in 0..KERNEL {
                    let sy = (oy * stride + ky) as i64 - PAD;
                    for kx in 0..KERNEL {
                        let sx = (ox * stride + kx) as i64 - PAD;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            cols[(row, ci * 9 + ky * 3 + kx)] =
                                input[(ci, sy as usize, sx as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds patch-row gradients back onto the input (transpose of `im2col`).
pub fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Array3<f64> {
    let oh = (h + 2 * PAD as usize - KERNEL) / stride + 1;
    let ow = (w + 2 * PAD as usize - KERNEL) / stride + 1;
    let mut dinput = Array3::zeros((cin, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..cin {
                for ky in 0..KERNEL {
                    let sy = (oy * stride + ky) as i64 - PAD;
                    for kx in 0..KERNEL {
                        let sx = (ox * stride + kx) as i64 - PAD;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            dinput[(ci, sy as usize, sx as usize)] +=
                                dcols[(row, ci * 9 + ky * 3 + kx)];
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// Forward pass; returns the output `(cout, h', w')` and the im2col matrix
/// (cached for the backward GEMMs).
pub fn conv_forward(conv: &Conv2d, input: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = conv.out_dims(h, w);
    let cols = im2col(input, conv.stride);
    let mut out_mat = cols.dot(&conv.weight.t());
    for mut row in out_mat.rows_mut() {
        row += &conv.bias;
    }
    // (h'*w', cout) -> (cout, h', w')
    let mut out = Array3::zeros((conv.cout, oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..conv.cout {
                out[(co, oy, ox)] = out_mat[(oy * ow + ox, co)];
            }
        }
    }
    (out, cols)
}

/// Backward pass; returns gradients for input, weight, and bias.
pub fn conv_backward(
    conv: &Conv2d,
    cols: &Array2<f64>,
    dout: &Array3<f64>,
    input_h: usize,
    input_w: usize,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
    let mut dout_mat = Array2::zeros((oh * ow, conv.cout));
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..conv.cout {
                dout_mat[(oy * ow + ox, co)] = dout[(co, oy, ox)];
            }
        }
    }
    let dweight = dout_mat.t().dot(cols);
    let dbias = dout_mat.sum_axis(ndarray::Axis(0));
    let dcols = dout_mat.dot(&conv.weight);
    let dinput = col2im(&dcols, conv.cin, input_h, input_w, conv.stride);
    (dinput, dweight, dbias)
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(preact: &Array3<f64>, dout: &Array3<f64>) -> Array3<f64> {
    let mut d = dout.clone();
    ndarray::Zip::from(&mut d).and(preact).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Clipped ReLU (ReLU6): `clamp(x, 0, 6)`. The saturation keeps sparse
/// high-magnitude responses (object edges) from dominating spatially
/// pooled statistics.
pub fn clipped_relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.clamp(0.0, 6.0))
}

pub fn clipped_relu_backward(preact: &Array3<f64>, dout: &Array3<f64>) -> Array3<f64> {
    let mut d = dout.clone();
    ndarray::Zip::from(&mut d).and(preact).for_each(|g, &p| {
        if !(0.0..6.0).contains(&p) {
            *g = 0.0;
        }
    });
    d
}

/// Position-wise linear map, weight `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        let dist = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).unwrap();
        Linear {
            weight: Array2::from_shape_fn((d_out, d_in), |_| dist.sample(rng)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Linear {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    /// Applies the map to a stack of row vectors `(n, in) -> (n, out)`.
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy with the prediction clamped away from {0,1} so the
/// value stays finite under extreme logits.
pub const BCE_EPS: f64 = 1e-6;

pub fn bce(target: f64, pred: f64) -> f64 {
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
