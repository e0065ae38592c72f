//! The RGB-only detection network: a small strided convolutional encoder
//! producing a patch-feature grid, a 3x3-convolution decoder emitting a
//! per-patch tamper probability map, and a pooled, dropout-regularized
//! affine head emitting the image-level tamper probability.
//!
//! RGB pixels are the sole input modality; there are no noise-residual
//! feature branches anywhere in the crate.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::EmbeddingHeads;
use crate::error::{Error, Result};
use crate::nn::{
    clipped_relu, clipped_relu_backward, conv_backward, conv_forward, sigmoid, Conv2d, Linear,
};
use crate::raster::pad_edge_replicate;
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels C of the encoder output.
    pub channels: usize,
    /// Image pixels per grid cell; must be a power of two.
    pub stride: usize,
    /// Number of 3x3 conv blocks in the encoder.
    pub encoder_depth: usize,
    pub dropout_rate: f64,
    /// Embedding dimension of the two patch-embedding heads.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            stride: 16,
            encoder_depth: 4,
            dropout_rate: 0.1,
            embed_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.stride == 0 || !self.stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "stride {} must be a power of two",
                self.stride
            )));
        }
        if self.encoder_depth < 1 || (1usize << self.encoder_depth) < self.stride {
            return Err(Error::Config(format!(
                "encoder_depth {} cannot realize stride {}",
                self.encoder_depth, self.stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0,1)".into()));
        }
        if self.embed_dim < 1 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-block strides: factors of two spread over the first blocks,
    /// remaining blocks stride 1.
    pub fn block_strides(&self) -> Vec<usize> {
        let mut remaining = self.stride;
        (0..self.encoder_depth)
            .map(|_| {
                if remaining > 1 {
                    remaining /= 2;
                    2
                } else {
                    1
                }
            })
            .collect()
    }
}

/// H' x W' grid of C-dimensional patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    /// Channel-first tensor `(C, H', W')`.
    pub values: Array3<f64>,
    pub stride: usize,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid_h(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn grid_w(&self) -> usize {
        self.values.shape()[2]
    }

    /// Rows ordered `(y * W' + x)`, shape `(H'W', C)`.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (c, h, w) = (self.channels(), self.grid_h(), self.grid_w());
        let mut m = Array2::zeros((h * w, c));
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    m[(y * w + x, ci)] = self.values[(ci, y, x)];
                }
            }
        }
        m
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub encoder: Vec<Conv2d>,
    pub decoder: Conv2d,
    pub head_weight: f64,
    pub head_bias: f64,
    pub heads: EmbeddingHeads,
}

/// Removes the DC component from every 3x3 tap group so a constant input
/// produces zero response at initialization. Absolute scene color is the
/// dominant source of cross-image variance and carries no tamper evidence;
/// starting the encoder blind to it lets the weak image-level labels latch
/// onto local texture statistics instead. Training can relearn a DC
/// response if it helps.
fn zero_dc(conv: &mut Conv2d) {
    let cout = conv.weight.shape()[0];
    let cin = conv.weight.shape()[1] / 9;
    for co in 0..cout {
        for ci in 0..cin {
            let base = ci * 9;
            let mean: f64 =
                (0..9).map(|k| conv.weight[(co, base + k)]).sum::<f64>() / 9.0;
            for k in 0..9 {
                conv.weight[(co, base + k)] -= mean;
            }
        }
    }
}

impl ParameterSet {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[0x1417]);
        let strides = cfg.block_strides();
        let mut encoder = Vec::with_capacity(cfg.encoder_depth);
        let mut cin = 3;
        for (i, &s) in strides.iter().enumerate() {
            let mut conv = Conv2d::init(cin, cfg.channels, s, &mut rng);
            if i == 0 {
                // The pixel-facing block starts DC-blind; the DC-free
                // residue of natural inputs has std far below the unit
                // scale He init assumes, so boost the block to compensate.
                // The result is a local-texture-energy response.
                zero_dc(&mut conv);
                conv.weight.mapv_inplace(|v| v * 16.0);
            } else {
                // Dirac/box structured init (identity-preserving, cf. dirac
                // initialization): deeper blocks start as channel-wise 3x3
                // averages plus a small random mixture. The init network
                // then propagates the first block's texture statistics to
                // the grid instead of scrambling them, which matters at
                // desk scale where training moves weights only slightly.
                conv.weight.mapv_inplace(|v| v * 0.3);
                for o in 0..cfg.channels {
                    for k in 0..9 {
                        conv.weight[(o, o * 9 + k)] += 1.0 / 9.0;
                    }
                }
            }
            encoder.push(conv);
            cin = cfg.channels;
        }
        // Zero-initialized output layer: the localization map starts exactly
        // uniform (0.5), so every image pools to the same statistic and all
        // later separation is learned signal rather than a random projection
        // of scene content.
        let mut decoder = Conv2d::init(cfg.channels, 1, 1, &mut rng);
        decoder.weight.fill(0.0);
        let heads = EmbeddingHeads {
            phi1: Linear::init(cfg.channels, cfg.embed_dim, &mut rng),
            phi2: Linear::init(cfg.channels, cfg.embed_dim, &mut rng),
            embed_dim: cfg.embed_dim,
        };
        Ok(ParameterSet {
            encoder,
            decoder,
            // logit starts near 0 for a ~0.5 localization map
            head_weight: 1.0,
            head_bias: -0.5,
            heads,
        })
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            encoder: self.encoder.iter().map(Conv2d::zeros_like).collect(),
            decoder: self.decoder.zeros_like(),
            head_weight: 0.0,
            head_bias: 0.0,
            heads: EmbeddingHeads {
                phi1: self.heads.phi1.zeros_like(),
                phi2: self.heads.phi2.zeros_like(),
                embed_dim: self.heads.embed_dim,
            },
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for c in &self.encoder {
            out.extend(c.weight.iter());
            out.extend(c.bias.iter());
        }
        out.extend(self.decoder.weight.iter());
        out.extend(self.decoder.bias.iter());
        out.push(self.head_weight);
        out.push(self.head_bias);
        for l in [&self.heads.phi1, &self.heads.phi2] {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        fn take(it: &mut impl Iterator<Item = f64>, arr: &mut [f64]) {
            for v in arr {
                *v = it.next().expect("flat vector too short");
            }
        }
        for c in &mut self.encoder {
            take(&mut it, c.weight.as_slice_mut().unwrap());
            take(&mut it, c.bias.as_slice_mut().unwrap());
        }
        take(&mut it, self.decoder.weight.as_slice_mut().unwrap());
        take(&mut it, self.decoder.bias.as_slice_mut().unwrap());
        self.head_weight = it.next().unwrap();
        self.head_bias = it.next().unwrap();
        for l in [&mut self.heads.phi1, &mut self.heads.phi2] {
            take(&mut it, l.weight.as_slice_mut().unwrap());
            take(&mut it, l.bias.as_slice_mut().unwrap());
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn n_params(&self) -> usize {
        let conv = |c: &Conv2d| c.weight.len() + c.bias.len();
        let lin = |l: &Linear| l.weight.len() + l.bias.len();
        self.encoder.iter().map(conv).sum::<usize>()
            + conv(&self.decoder)
            + 2
            + lin(&self.heads.phi1)
            + lin(&self.heads.phi2)
    }

    /// Adds `other` scaled by `alpha` into `self` (gradient accumulation).
    pub fn axpy(&mut self, alpha: f64, other: &ParameterSet) {
        let mut flat = self.flatten();
        let of = other.flatten();
        for (a, b) in flat.iter_mut().zip(of.iter()) {
            *a += alpha * b;
        }
        self.assign_flat(&flat);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pads a `(3, H, W)` tensor to the next stride multiple by edge
/// replication; pixel values are never resampled.
pub fn pad_to_stride(t: &Array3<f64>, stride: usize) -> Array3<f64> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let nh = h.div_ceil(stride) * stride;
    let nw = w.div_ceil(stride) * stride;
    if nh == h && nw == w {
        t.clone()
    } else {
        pad_edge_replicate(t, nh, nw)
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each encoder block (index 0 is the padded image tensor).
    pub layer_inputs: Vec<Array3<f64>>,
    pub cols: Vec<Array2<f64>>,
    /// Pre-activation output of each encoder block.
    pub preacts: Vec<Array3<f64>>,
    pub features: Array3<f64>,
    pub dec_cols: Array2<f64>,
    pub loc_logits: Array2<f64>,
    pub loc: Array2<f64>,
    pub pooled: f64,
    /// Dropout multiplier applied to the pooled value (1.0 in eval mode).
    pub keep: f64,
    pub logit: f64,
    pub prob: f64,
}

impl ForwardTrace {
    pub fn feature_grid(&self, stride: usize) -> FeatureGrid {
        FeatureGrid {
            values: self.features.clone(),
            stride,
        }
    }
}

/// Runs encoder, decoder, and classification head on an already padded and
/// normalized `(3, H, W)` tensor.
pub fn forward(
    x: &Array3<f64>,
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardTrace> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h < cfg.stride || w < cfg.stride {
        return Err(Error::Argument(format!(
            "image {h}x{w} smaller than one stride ({})",
            cfg.stride
        )));
    }
    debug_assert!(h % cfg.stride == 0 && w % cfg.stride == 0, "caller must pad");

    let depth = params.encoder.len();
    let mut layer_inputs = Vec::with_capacity(depth);
    let mut cols = Vec::with_capacity(depth);
    let mut preacts = Vec::with_capacity(depth);
    let mut cur = x.clone();
    for conv in &params.encoder {
        let (out, c) = conv_forward(conv, &cur);
        layer_inputs.push(cur);
        cols.push(c);
        // ReLU on every block, including the last: nonnegative features make
        // first-order channel statistics track local texture energy, which
        // the linear decoder can read directly.
        cur = clipped_relu(&out);
        preacts.push(out);
    }
    let features = cur;

    let (dec_out, dec_cols) = conv_forward(&params.decoder, &features);
    let (gh, gw) = (dec_out.shape()[1], dec_out.shape()[2]);
    let mut loc_logits = Array2::zeros((gh, gw));
    for y in 0..gh {
        for x in 0..gw {
            loc_logits[(y, x)] = dec_out[(0, y, x)];
        }
    }
    let loc = loc_logits.mapv(sigmoid);

    let pooled = loc.mean().unwrap_or(0.0);
    let keep = match mode {
        Mode::Eval => 1.0,
        Mode::Train if cfg.dropout_rate == 0.0 => 1.0,
        Mode::Train => {
            use rand::Rng;
            let rng = dropout_rng.expect("train mode with dropout needs an RNG");
            if rng.random_range(0.0..1.0) < cfg.dropout_rate {
                0.0
            } else {
                1.0 / (1.0 - cfg.dropout_rate)
            }
        }
    };
    let logit = params.head_weight * pooled * keep + params.head_bias;
    let prob = sigmoid(logit);

    Ok(ForwardTrace {
        layer_inputs,
        cols,
        preacts,
        features,
        dec_cols,
        loc_logits,
        loc,
        pooled,
        keep,
        logit,
        prob,
    })
}

/// Backpropagates through head, decoder, and encoder.
///
/// `dlogit` is dL/d(classifier logit); `dfeatures_extra` is an additional
/// gradient flowing into the feature grid (from the consistency branch).
/// Embedding-head gradients are not produced here.
pub fn backward(
    trace: &ForwardTrace,
    params: &ParameterSet,
    dlogit: f64,
    dfeatures_extra: Option<&Array3<f64>>,
) -> ParameterSet {
    let mut grads = params.zeros_like();

    // head
    grads.head_weight = dlogit * trace.pooled * trace.keep;
    grads.head_bias = dlogit;
    let dpooled = dlogit * params.head_weight * trace.keep;

    // mean pool -> loc -> decoder logits
    let (gh, gw) = (trace.loc.shape()[0], trace.loc.shape()[1]);
    let n = (gh * gw) as f64;
    let mut ddec_out = Array3::zeros((1, gh, gw));
    for y in 0..gh {
        for x in 0..gw {
            let s = trace.loc[(y, x)];
            ddec_out[(0, y, x)] = dpooled / n * s * (1.0 - s);
        }
    }
    let (mut dfeat, dw_dec, db_dec) = conv_backward(
        &params.decoder,
        &trace.dec_cols,
        &ddec_out,
        gh,
        gw,
    );
    grads.decoder.weight = dw_dec;
    grads.decoder.bias = db_dec;

    if let Some(extra) = dfeatures_extra {
        dfeat += extra;
    }

    // encoder, last block first
    let depth = params.encoder.len();
    let mut dcur = clipped_relu_backward(&trace.preacts[depth - 1], &dfeat);
    for i in (0..depth).rev() {
        let conv = &params.encoder[i];
        let input = &trace.layer_inputs[i];
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let (dinput, dw, db) = conv_backward(conv, &trace.cols[i], &dcur, h, w);
        grads.encoder[i].weight = dw;
        grads.encoder[i].bias = db;
        dcur = if i > 0 {
            clipped_relu_backward(&trace.preacts[i - 1], &dinput)
        } else {
            dinput
        };
    }
    grads
}

/// Encoder-only forward: patch features for an arbitrary (>= one stride)
/// image tensor; pads internally.
pub fn encode(x: &Array3<f64>, cfg: &ModelConfig, params: &ParameterSet) -> Result<FeatureGrid> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if h < cfg.stride || w < cfg.stride {
        return Err(Error::Argument(format!(
            "image {h}x{w} smaller than one stride ({})",
            cfg.stride
        )));
    }
    let padded = pad_to_stride(x, cfg.stride);
    let mut cur = padded;
    for conv in &params.encoder {
        let (out, _) = conv_forward(conv, &cur);
        cur = clipped_relu(&out);
    }
    Ok(FeatureGrid {
        values: cur,
        stride: cfg.stride,
    })
}

/// Decoder-only forward: per-cell tamper probabilities in (0,1).
pub fn decode(features: &FeatureGrid, params: &ParameterSet) -> Array2<f64> {
    let (out, _) = conv_forward(&params.decoder, &features.values);
    let (gh, gw) = (out.shape()[1], out.shape()[2]);
    Array2::from_shape_fn((gh, gw), |(y, x)| sigmoid(out[(0, y, x)]))
}

/// Classification head on a localization map.
pub fn classify(
    loc: &Array2<f64>,
    dropout_rate: f64,
    params: &ParameterSet,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> f64 {
    let pooled = loc.mean().unwrap_or(0.0);
    let keep = match mode {
        Mode::Eval => 1.0,
        Mode::Train if dropout_rate == 0.0 => 1.0,
        Mode::Train => {
            use rand::Rng;
            let rng = dropout_rng.expect("train mode with dropout needs an RNG");
            if rng.random_range(0.0..1.0) < dropout_rate {
                0.0
            } else {
                1.0 / (1.0 - dropout_rate)
            }
        }
    };
    sigmoid(params.head_weight * pooled * keep + params.head_bias)
}
