//! Tensor type and the batch forward pass (convolutions, batch norm,
//! activations, resampling). All math in f64.

use crate::error::{Error, Result};
use crate::image::MultiChannelImage;

use super::{ConvLayer, HeadKind, NetworkParameters};

/// Planar `channels x height x width` f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn from_image(img: &MultiChannelImage) -> Self {
        Tensor {
            channels: img.channels(),
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_image(&self) -> MultiChannelImage {
        MultiChannelImage::from_vec(
            self.width,
            self.height,
            self.channels,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("tensor dimensions are consistent")
    }

    /// Stacks `other`'s channels after this tensor's channels.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits the leading `first` channels from the rest.
    pub fn split(&self, first: usize) -> (Tensor, Tensor) {
        assert!(first <= self.channels);
        let plane = self.height * self.width;
        let a = Tensor {
            channels: first,
            height: self.height,
            width: self.width,
            data: self.data[..first * plane].to_vec(),
        };
        let b = Tensor {
            channels: self.channels - first,
            height: self.height,
            width: self.width,
            data: self.data[first * plane..].to_vec(),
        };
        (a, b)
    }

    /// Aligned crop.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Tensor {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let v = self.get(c, y0 + y, x0 + x);
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }

    /// Pads to `(h, w)` by edge replication on the bottom/right.
    pub fn pad_replicate_to(&self, w: usize, h: usize) -> Tensor {
        assert!(w >= self.width && h >= self.height);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let sy = y.min(self.height - 1);
                    let sx = x.min(self.width - 1);
                    let v = self.get(c, sy, sx);
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.channels, t.height * 2, t.width * 2);
    for c in 0..t.channels {
        for y in 0..out.height {
            for x in 0..out.width {
                let v = t.get(c, y / 2, x / 2);
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums gradients over each replicated 2x2 block.
pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, grad.height / 2, grad.width / 2);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                let v = grad.get(c, y, x);
                let i = out.idx(c, y / 2, x / 2);
                out.data[i] += v;
            }
        }
    }
    out
}

/// Leaky rectified linear unit.
#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Subderivative of [`leaky_relu`] (1 at x = 0).
#[inline]
pub fn leaky_relu_derivative(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-padded correlation with stride; `pad` applies to the top/left,
/// `out_h/out_w` fix the output size (bottom/right padding is implied).
pub fn conv2d(
    input: &Tensor,
    layer: &ConvLayer,
    k: usize,
    stride: usize,
    pad: isize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    debug_assert_eq!(input.channels, layer.c_in);
    let mut out = Tensor::zeros(layer.c_out, out_h, out_w);
    let (ih, iw) = (input.height as isize, input.width as isize);
    for o in 0..layer.c_out {
        let w_base = o * layer.c_in * k * k;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = layer.bias[o];
                let y0 = (oy * stride) as isize - pad;
                let x0 = (ox * stride) as isize - pad;
                for i in 0..layer.c_in {
                    let wk = w_base + i * k * k;
                    let in_plane = i * input.height * input.width;
                    for ky in 0..k {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= ih {
                            continue;
                        }
                        let row = in_plane + yy as usize * input.width;
                        for kx in 0..k {
                            let xx = x0 + kx as isize;
                            if xx < 0 || xx >= iw {
                                continue;
                            }
                            acc +=
                                layer.weights[wk + ky * k + kx] * input.data[row + xx as usize];
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: scatter-adds into the weight/bias/input grads.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
    k: usize,
    stride: usize,
    pad: isize,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor {
    let mut grad_in = Tensor::zeros(input.channels, input.height, input.width);
    let (ih, iw) = (input.height as isize, input.width as isize);
    for o in 0..layer.c_out {
        let w_base = o * layer.c_in * k * k;
        for oy in 0..grad_out.height {
            for ox in 0..grad_out.width {
                let g = grad_out.get(o, oy, ox);
                if g == 0.0 {
                    continue;
                }
                grad_bias[o] += g;
                let y0 = (oy * stride) as isize - pad;
                let x0 = (ox * stride) as isize - pad;
                for i in 0..layer.c_in {
                    let wk = w_base + i * k * k;
                    let in_plane = i * input.height * input.width;
                    for ky in 0..k {
                        let yy = y0 + ky as isize;
                        if yy < 0 || yy >= ih {
                            continue;
                        }
                        let row = in_plane + yy as usize * input.width;
                        for kx in 0..k {
                            let xx = x0 + kx as isize;
                            if xx < 0 || xx >= iw {
                                continue;
                            }
                            let idx = row + xx as usize;
                            grad_weights[wk + ky * k + kx] += g * input.data[idx];
                            grad_in.data[idx] += g * layer.weights[wk + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub const BN_EPSILON: f64 = 1e-5;
/// Running-average update rate for batch-norm statisics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Train/inference mode for the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch-norm cache for the backward pass.
#[derive(Debug, Clone)]
pub struct BnBatchCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Normalized (pre-affine) values per sample.
    pub normalized: Vec<Tensor>,
}

/// Per-layer forward cache.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Convolution input per sample (post-upsample for decoder layers).
    pub conv_input: Vec<Tensor>,
    pub bn: Option<BnBatchCache>,
    /// Post-BN pre-activation per sample; for encoder layers this is the skip
    /// source.
    pub pre_act: Vec<Tensor>,
    /// Full concatenated pre-activation for decoder layers with a skip.
    pub concat_pre_act: Option<Vec<Tensor>>,
}

/// Whole-network forward cache.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub enc: Vec<LayerCache>,
    pub dec: Vec<LayerCache>,
    pub outputs: Vec<Tensor>,
}

/// Batch normalization over (batch, height, width) per channel.
fn batch_norm_train(
    batch: &[Tensor],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<Tensor>, BnBatchCache) {
    let channels = batch[0].channels;
    let plane = batch[0].height * batch[0].width;
    let n = (batch.len() * plane) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for t in batch {
        for c in 0..channels {
            let s: f64 = t.data[c * plane..(c + 1) * plane].iter().sum();
            mean[c] += s;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for t in batch {
        for c in 0..channels {
            let mut s = 0.0;
            for &v in &t.data[c * plane..(c + 1) * plane] {
                let d = v - mean[c];
                s += d * d;
            }
            var[c] += s;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    let mut normalized = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for t in batch {
        let mut norm = t.clone();
        let mut out = t.clone();
        for c in 0..channels {
            let inv = 1.0 / (var[c] + BN_EPSILON).sqrt();
            for i in c * plane..(c + 1) * plane {
                let nv = (t.data[i] - mean[c]) * inv;
                norm.data[i] = nv;
                out.data[i] = gamma[c] * nv + beta[c];
            }
        }
        normalized.push(norm);
        outputs.push(out);
    }
    (
        outputs,
        BnBatchCache {
            mean,
            var,
            normalized,
        },
    )
}

/// Inference-mode batch norm: a fixed affine map from running statistics.
fn batch_norm_infer(t: &Tensor, bn: &super::BatchNormState) -> Tensor {
    let plane = t.height * t.width;
    let mut out = t.clone();
    for c in 0..t.channels {
        let inv = 1.0 / (bn.running_var[c] + BN_EPSILON).sqrt();
        for i in c * plane..(c + 1) * plane {
            out.data[i] = bn.gamma[c] * (t.data[i] - bn.running_mean[c]) * inv + bn.beta[c];
        }
    }
    out
}

fn apply_leaky(batch: &[Tensor], slope: f64) -> Vec<Tensor> {
    batch
        .iter()
        .map(|t| {
            let mut out = t.clone();
            for v in &mut out.data {
                *v = leaky_relu(*v, slope);
            }
            out
        })
        .collect()
}

fn apply_head(batch: &[Tensor], head: HeadKind) -> Vec<Tensor> {
    batch
        .iter()
        .map(|t| {
            let mut out = t.clone();
            let plane = t.height * t.width;
            match head {
                HeadKind::Edge => {
                    for v in &mut out.data {
                        *v = sigmoid(*v);
                    }
                }
                HeadKind::ContourDirection => {
                    for (i, v) in out.data.iter_mut().enumerate() {
                        if i < plane {
                            *v = sigmoid(*v);
                        } else {
                            *v = v.tanh();
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Runs the full network on a batch. Pure: running batch-norm statistics are
/// not touched; apply [`update_running_stats`] with the returned cache to
/// advance them during training.
pub fn forward_batch(
    params: &NetworkParameters,
    batch: &[Tensor],
    mode: Mode,
) -> Result<(Vec<Tensor>, ForwardCache)> {
    let cfg = &params.config;
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let multiple = cfg.spatial_multiple();
    for t in batch {
        if t.channels != cfg.input_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, network expects {}",
                t.channels, cfg.input_channels
            )));
        }
        if t.width % multiple != 0 || t.height % multiple != 0 || t.width == 0 || t.height == 0 {
            return Err(Error::Shape(format!(
                "input {}x{} must be a positive multiple of {multiple} in each dimension",
                t.width, t.height
            )));
        }
        if (t.width, t.height) != (batch[0].width, batch[0].height) {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
    }

    let n = cfg.n_enc();
    let k = cfg.kernel;
    let mut enc_caches = Vec::with_capacity(n);
    let mut current: Vec<Tensor> = batch.to_vec();

    for i in 0..n {
        let layer = &params.layers[i];
        let out_h = current[0].height / 2;
        let out_w = current[0].width / 2;
        let conv_out: Vec<Tensor> = current
            .iter()
            .map(|t| conv2d(t, layer, k, 2, 1, out_h, out_w))
            .collect();
        let (pre_act, bn_cache) = match (&layer.bn, mode) {
            (Some(bn), Mode::Train) => {
                let (out, cache) = batch_norm_train(&conv_out, &bn.gamma, &bn.beta);
                (out, Some(cache))
            }
            (Some(bn), Mode::Infer) => {
                (conv_out.iter().map(|t| batch_norm_infer(t, bn)).collect(), None)
            }
            (None, _) => (conv_out.clone(), None),
        };
        let activated = apply_leaky(&pre_act, cfg.leaky_slope);
        enc_caches.push(LayerCache {
            conv_input: current,
            bn: bn_cache,
            pre_act,
            concat_pre_act: None,
        });
        current = activated;
    }

    let mut dec_caches = Vec::with_capacity(n);
    for j in 0..n {
        let layer = &params.layers[n + j];
        let upsampled: Vec<Tensor> = current.iter().map(upsample2).collect();
        let out_h = upsampled[0].height;
        let out_w = upsampled[0].width;
        let conv_out: Vec<Tensor> = upsampled
            .iter()
            .map(|t| conv2d(t, layer, k, 1, 1, out_h, out_w))
            .collect();
        let (pre_act, bn_cache) = match (&layer.bn, mode) {
            (Some(bn), Mode::Train) => {
                let (out, cache) = batch_norm_train(&conv_out, &bn.gamma, &bn.beta);
                (out, Some(cache))
            }
            (Some(bn), Mode::Infer) => {
                (conv_out.iter().map(|t| batch_norm_infer(t, bn)).collect(), None)
            }
            (None, _) => (conv_out.clone(), None),
        };

        let (next, concat_pre_act) = if let Some(src) = cfg.skip_source(j) {
            let concat: Vec<Tensor> = pre_act
                .iter()
                .zip(&enc_caches[src].pre_act)
                .map(|(d, e)| d.concat(e))
                .collect();
            let activated = apply_leaky(&concat, cfg.leaky_slope);
            (activated, Some(concat))
        } else {
            (apply_head(&pre_act, cfg.head), None)
        };
        dec_caches.push(LayerCache {
            conv_input: upsampled,
            bn: bn_cache,
            pre_act,
            concat_pre_act,
        });
        current = next;
    }

    let cache = ForwardCache {
        enc: enc_caches,
        dec: dec_caches,
        outputs: current.clone(),
    };
    Ok((current, cache))
}

/// Folds the batch statistics of a training forward pass into the running
/// averages.
pub fn update_running_stats(params: &mut NetworkParameters, cache: &ForwardCache) {
    for (li, lc) in cache.enc.iter().chain(cache.dec.iter()).enumerate() {
        let layer = &mut params.layers[li];
        if let (Some(bn), Some(bc)) = (layer.bn.as_mut(), lc.bn.as_ref()) {
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * bc.mean[c];
                bn.running_var[c] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * bc.var[c];
            }
        }
    }
}

/// Standard compact batch-norm backward. Returns the input gradient and
/// accumulates the affine parameter gradients.
pub fn batch_norm_backward(
    grad_out: &[Tensor],
    cache: &BnBatchCache,
    gamma: &[f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Vec<Tensor> {
    let channels = grad_out[0].channels;
    let plane = grad_out[0].height * grad_out[0].width;
    let n = (grad_out.len() * plane) as f64;

    // Per-channel sums of dxhat and dxhat * xhat.
    let mut sum_d = vec![0.0; channels];
    let mut sum_dx = vec![0.0; channels];
    for (g, norm) in grad_out.iter().zip(&cache.normalized) {
        for c in 0..channels {
            for i in c * plane..(c + 1) * plane {
                let dxhat = g.data[i] * gamma[c];
                sum_d[c] += dxhat;
                sum_dx[c] += dxhat * norm.data[i];
                grad_beta[c] += g.data[i];
                grad_gamma[c] += g.data[i] * norm.data[i];
            }
        }
    }

    grad_out
        .iter()
        .zip(&cache.normalized)
        .map(|(g, norm)| {
            let mut out = g.clone();
            for c in 0..channels {
                let inv = 1.0 / (cache.var[c] + BN_EPSILON).sqrt();
                for i in c * plane..(c + 1) * plane {
                    let dxhat = g.data[i] * gamma[c];
                    out.data[i] =
                        inv * (dxhat - sum_d[c] / n - norm.data[i] * sum_dx[c] / n);
                }
            }
            out
        })
        .collect()
}
