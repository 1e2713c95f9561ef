//! Loss, masking, backpropagation, Adam, patch sampling, the training loop
//! and inference.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{self, FilterSpec, MultiChannelImage};
use crate::io;
use crate::scene::DatasetManifest;

use super::layers::{
    batch_norm_backward, conv2d_backward, forward_batch, leaky_relu_derivative, update_running_stats,
    upsample2_backward, ForwardCache, Mode, Tensor,
};
use super::{HeadKind, NetworkParameters};

/// Fixed scale applied to the disparity channel before it enters the network,
/// bringing desk-scale disparities into the same range as color and normals.
/// Must match between training and inference.
pub const DISPARITY_INPUT_SCALE: f64 = 1.0 / 16.0;

/// Masked mean squared error: `E = (1/n) || M (P - T) ||^2` over all batch
/// elements.
pub fn loss(outputs: &[Tensor], targets: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    check_aligned(outputs, targets, masks)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((o, t), m) in outputs.iter().zip(targets).zip(masks) {
        for i in 0..o.data.len() {
            let d = m.data[i] * (o.data[i] - t.data[i]);
            sum += d * d;
        }
        n += o.data.len();
    }
    Ok(sum / n as f64)
}

/// Gradient of [`loss`] with respect to the outputs.
pub fn loss_gradient(outputs: &[Tensor], targets: &[Tensor], masks: &[Tensor]) -> Result<Vec<Tensor>> {
    check_aligned(outputs, targets, masks)?;
    let n: usize = outputs.iter().map(|o| o.data.len()).sum();
    Ok(outputs
        .iter()
        .zip(targets)
        .zip(masks)
        .map(|((o, t), m)| {
            let mut g = o.clone();
            for i in 0..g.data.len() {
                g.data[i] = 2.0 * m.data[i] * m.data[i] * (o.data[i] - t.data[i]) / n as f64;
            }
            g
        })
        .collect())
}

fn check_aligned(outputs: &[Tensor], targets: &[Tensor], masks: &[Tensor]) -> Result<()> {
    if outputs.len() != targets.len() || outputs.len() != masks.len() {
        return Err(Error::Shape("batch length mismatch".into()));
    }
    for ((o, t), m) in outputs.iter().zip(targets).zip(masks) {
        if o.data.len() != t.data.len() || o.data.len() != m.data.len() {
            return Err(Error::Shape(format!(
                "loss shapes differ: output {}x{}x{}, target {}x{}x{}, mask {}x{}x{}",
                o.channels, o.height, o.width, t.channels, t.height, t.width, m.channels,
                m.height, m.width
            )));
        }
    }
    Ok(())
}

/// Loss-mask construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    /// Weight at color edges that do not coincide with depth edges.
    pub weight: f32,
    /// Depth-edge threshold on the ground-truth probability.
    pub edge_threshold: f32,
    /// Per-image percentile of the color gradient magnitude that defines a
    /// color edge.
    pub color_percentile: f64,
    /// A color edge "coincides" with a depth edge when one lies within this
    /// Chebyshev radius. The discrete contour probability rides the flanks
    /// of a discontinuity with a valley on it, so exact-pixel coincidence
    /// would put the penalty weight right on real contours.
    pub coincide_radius: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            weight: 10.0,
            edge_threshold: 0.5,
            color_percentile: 0.90,
            coincide_radius: 2,
        }
    }
}

/// Builds the loss mask: `weight` at color edges that are not depth edges,
/// 1 everywhere else.
pub fn make_mask(
    color: &MultiChannelImage,
    edge_gt: &MultiChannelImage,
    cfg: &MaskConfig,
) -> Result<MultiChannelImage> {
    if color.channels() != 3 {
        return Err(Error::Shape(format!(
            "mask needs a 3-channel color image, got {}",
            color.channels()
        )));
    }
    if color.width() != edge_gt.width() || color.height() != edge_gt.height() {
        return Err(Error::Shape(format!(
            "color {}x{} vs edges {}x{}",
            color.width(),
            color.height(),
            edge_gt.width(),
            edge_gt.height()
        )));
    }
    let lum = MultiChannelImage::from_fn(color.width(), color.height(), 1, |x, y, _| {
        0.299 * color.get(x, y, 0) + 0.587 * color.get(x, y, 1) + 0.114 * color.get(x, y, 2)
    });
    let grad = image::gradient_magnitude(&lum, &FilterSpec::CentralDifference)?;
    let mut sorted: Vec<f32> = grad.data().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() - 1) as f64 * cfg.color_percentile).round() as usize;
    // Floor keeps flat images from classifying noise as edges.
    let threshold = sorted[idx].max(0.02);

    // Depth-edge zone, dilated by the coincidence radius.
    let (w, h) = (color.width(), color.height());
    let r = cfg.coincide_radius as isize;
    let mut near_depth_edge = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if edge_gt.get(x, y, 0) > cfg.edge_threshold {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                            near_depth_edge[ny as usize * w + nx as usize] = true;
                        }
                    }
                }
            }
        }
    }

    let mut mask = MultiChannelImage::splat(w, h, 1, 1.0);
    for y in 0..h {
        for x in 0..w {
            let color_edge = grad.get(x, y, 0) >= threshold;
            if color_edge && !near_depth_edge[y * w + x] {
                mask.set(x, y, 0, cfg.weight);
            }
        }
    }
    Ok(mask)
}

/// Per-layer parameter gradients, mirroring [`NetworkParameters`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParameters) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                    gamma: vec![0.0; l.bn.as_ref().map_or(0, |b| b.gamma.len())],
                    beta: vec![0.0; l.bn.as_ref().map_or(0, |b| b.beta.len())],
                })
                .collect(),
        }
    }
}

/// Derivative of the head activation, evaluated from the activated outputs.
fn head_derivative(outputs: &[Tensor], head: HeadKind, grad_out: &[Tensor]) -> Vec<Tensor> {
    outputs
        .iter()
        .zip(grad_out)
        .map(|(o, g)| {
            let mut out = g.clone();
            let plane = o.height * o.width;
            for i in 0..o.data.len() {
                let s = o.data[i];
                let d = match head {
                    HeadKind::Edge => s * (1.0 - s),
                    HeadKind::ContourDirection => {
                        if i < plane {
                            s * (1.0 - s)
                        } else {
                            1.0 - s * s
                        }
                    }
                };
                out.data[i] *= d;
            }
            out
        })
        .collect()
}

/// Backpropagates a loss gradient through the cached forward pass. The L2
/// term contributes `2 lambda p` for every trainable parameter.
pub fn backward_batch(
    params: &NetworkParameters,
    cache: &ForwardCache,
    grad_outputs: &[Tensor],
    l2_lambda: f64,
) -> Result<Gradients> {
    let cfg = &params.config;
    let n = cfg.n_enc();
    let k = cfg.kernel;
    if grad_outputs.len() != cache.outputs.len() {
        return Err(Error::Shape("gradient batch length mismatch".into()));
    }
    let mut grads = Gradients::zeros_like(params);

    // Skip-path gradients accumulate per encoder layer (w.r.t. pre-activation).
    let mut enc_skip_grad: Vec<Option<Vec<Tensor>>> = vec![None; n];

    // Through the head activation.
    let mut g: Vec<Tensor> = head_derivative(&cache.outputs, cfg.head, grad_outputs);

    // Decoder layers, last to first.
    for j in (0..n).rev() {
        let li = n + j;
        let layer = &params.layers[li];
        let lc = &cache.dec[j];

        if let Some(src) = cfg.skip_source(j) {
            // g is w.r.t. the activated concat tensor.
            let concat = lc
                .concat_pre_act
                .as_ref()
                .ok_or_else(|| Error::Numeric("missing concat cache; forward must run in training mode".into()))?;
            let mut g_dec = Vec::with_capacity(g.len());
            let mut g_skip = Vec::with_capacity(g.len());
            for (gt, pre) in g.iter().zip(concat) {
                let mut full = gt.clone();
                for i in 0..full.data.len() {
                    full.data[i] *= leaky_relu_derivative(pre.data[i], cfg.leaky_slope);
                }
                let (dec_part, skip_part) = full.split(layer.c_out);
                g_dec.push(dec_part);
                g_skip.push(skip_part);
            }
            enc_skip_grad[src] = Some(g_skip);
            g = g_dec;
        }

        let lg = &mut grads.layers[li];
        let g_conv = match (&layer.bn, &lc.bn) {
            (Some(bn), Some(bc)) => {
                batch_norm_backward(&g, bc, &bn.gamma, &mut lg.gamma, &mut lg.beta)
            }
            (None, None) => g,
            _ => {
                return Err(Error::Numeric(
                    "batch-norm cache mismatch; forward must run in training mode".into(),
                ))
            }
        };

        let mut g_up = Vec::with_capacity(g_conv.len());
        for (gt, input) in g_conv.iter().zip(&lc.conv_input) {
            let g_in =
                conv2d_backward(input, layer, gt, k, 1, 1, &mut lg.weights, &mut lg.bias);
            g_up.push(upsample2_backward(&g_in));
        }
        g = g_up;
    }

    // Encoder layers, last to first. `g` is w.r.t. the activated output.
    for i in (0..n).rev() {
        let layer = &params.layers[i];
        let lc = &cache.enc[i];
        let mut g_z = Vec::with_capacity(g.len());
        for (bi, (gt, pre)) in g.iter().zip(&lc.pre_act).enumerate() {
            let mut z = gt.clone();
            for idx in 0..z.data.len() {
                z.data[idx] *= leaky_relu_derivative(pre.data[idx], cfg.leaky_slope);
            }
            if let Some(skips) = &enc_skip_grad[i] {
                for (a, b) in z.data.iter_mut().zip(&skips[bi].data) {
                    *a += b;
                }
            }
            g_z.push(z);
        }

        let lg = &mut grads.layers[i];
        let g_conv = match (&layer.bn, &lc.bn) {
            (Some(bn), Some(bc)) => {
                batch_norm_backward(&g_z, bc, &bn.gamma, &mut lg.gamma, &mut lg.beta)
            }
            (None, None) => g_z,
            _ => {
                return Err(Error::Numeric(
                    "batch-norm cache mismatch; forward must run in training mode".into(),
                ))
            }
        };

        let mut g_prev = Vec::with_capacity(g_conv.len());
        for (gt, input) in g_conv.iter().zip(&lc.conv_input) {
            let g_in =
                conv2d_backward(input, layer, gt, k, 2, 1, &mut lg.weights, &mut lg.bias);
            g_prev.push(g_in);
        }
        g = g_prev;
    }

    if l2_lambda != 0.0 {
        for (lg, layer) in grads.layers.iter_mut().zip(&params.layers) {
            for (g, p) in lg.weights.iter_mut().zip(&layer.weights) {
                *g += 2.0 * l2_lambda * p;
            }
            for (g, p) in lg.bias.iter_mut().zip(&layer.bias) {
                *g += 2.0 * l2_lambda * p;
            }
            if let Some(bn) = &layer.bn {
                for (g, p) in lg.gamma.iter_mut().zip(&bn.gamma) {
                    *g += 2.0 * l2_lambda * p;
                }
                for (g, p) in lg.beta.iter_mut().zip(&bn.beta) {
                    *g += 2.0 * l2_lambda * p;
                }
            }
        }
    }

    Ok(grads)
}

/// Sum of squares of all trainable parameters (the L2 term is
/// `lambda * param_squared_norm`).
pub fn param_squared_norm(params: &NetworkParameters) -> f64 {
    let mut sum = 0.0;
    for layer in &params.layers {
        sum += layer.weights.iter().map(|v| v * v).sum::<f64>();
        sum += layer.bias.iter().map(|v| v * v).sum::<f64>();
        if let Some(bn) = &layer.bn {
            sum += bn.gamma.iter().map(|v| v * v).sum::<f64>();
            sum += bn.beta.iter().map(|v| v * v).sum::<f64>();
        }
    }
    sum
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub l2_lambda: f64,
    pub mask_weight: f32,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of scenes held out for the per-epoch validation loss.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 256,
            batch_size: 5,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            l2_lambda: 1e-5,
            mask_weight: 10.0,
            epochs: 30,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 64-px patches.
    pub fn desk() -> Self {
        TrainConfig {
            patch_size: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2
            || self.batch_size == 0
            || self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_epsilon <= 0.0
            || self.l2_lambda < 0.0
            || self.mask_weight <= 0.0
            || self.epochs == 0
            || !(0.0..1.0).contains(&self.val_fraction)
        {
            return Err(Error::Config("invalid training configuration".into()));
        }
        Ok(())
    }
}

/// Adam first/second moment state, one pair of buffers per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParameters) -> Self {
        let sizes: Vec<usize> = param_tensor_sizes(params);
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

fn param_tensor_sizes(params: &NetworkParameters) -> Vec<usize> {
    let mut sizes = Vec::new();
    for layer in &params.layers {
        sizes.push(layer.weights.len());
        sizes.push(layer.bias.len());
        if let Some(bn) = &layer.bn {
            sizes.push(bn.gamma.len());
            sizes.push(bn.beta.len());
        }
    }
    sizes
}

fn for_each_param_tensor(
    params: &mut NetworkParameters,
    grads: &Gradients,
    mut f: impl FnMut(usize, &mut [f64], &[f64]),
) {
    let mut idx = 0;
    for (layer, lg) in params.layers.iter_mut().zip(&grads.layers) {
        f(idx, &mut layer.weights, &lg.weights);
        idx += 1;
        f(idx, &mut layer.bias, &lg.bias);
        idx += 1;
        if let Some(bn) = layer.bn.as_mut() {
            f(idx, &mut bn.gamma, &lg.gamma);
            idx += 1;
            f(idx, &mut bn.beta, &lg.beta);
            idx += 1;
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParameters,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let m = &mut state.m;
    let v = &mut state.v;
    for_each_param_tensor(params, grads, |idx, p, g| {
        let (m, v) = (&mut m[idx], &mut v[idx]);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_epsilon);
        }
    });
}

/// One scene lifted into network tensors: 7-channel input, head target and
/// per-element loss mask.
#[derive(Debug, Clone)]
pub struct SceneTensors {
    pub input: Tensor,
    pub target: Tensor,
    pub mask: Tensor,
}

/// Assembles the 7-channel input with the disparity channel rescaled by
/// [`DISPARITY_INPUT_SCALE`].
pub fn assemble_input(
    color: &MultiChannelImage,
    disparity: &MultiChannelImage,
    normals: &MultiChannelImage,
) -> Result<Tensor> {
    if color.channels() != 3 || disparity.channels() != 1 || normals.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected 3+1+3 input channels, got {}+{}+{}",
            color.channels(),
            disparity.channels(),
            normals.channels()
        )));
    }
    let scaled = disparity.map(|v| (v as f64 * DISPARITY_INPUT_SCALE) as f32);
    let img = MultiChannelImage::concat_channels(&[color, &scaled, normals])?;
    Ok(Tensor::from_image(&img))
}

/// Logistic center for the forward-difference disparity jump that marks a
/// refinement contour.
pub const CONTOUR_JUMP_ALPHA: f64 = 2.0;

/// Builds the contour+direction training target and its per-channel mask from
/// clean disparity.
///
/// Channel 0 marks the jump support itself: the logistic of the
/// forward-difference gradient magnitude, so the flagged pixels are exactly
/// the rows of the refiner's forward-difference operators that span a
/// discontinuity (the curvature-based contour probability instead rides the
/// flanks of a step, which would constrain the wrong rows). Channels 1-2 are
/// the normalized forward-difference direction at those pixels and zero
/// elsewhere; their loss mask covers only pixels with a defined direction.
pub fn make_contour_direction_target(
    disp_gt: &MultiChannelImage,
    color_mask: &MultiChannelImage,
) -> Result<(Tensor, Tensor)> {
    if disp_gt.channels() != 1 {
        return Err(Error::Shape("disparity must be single-channel".into()));
    }
    let alpha = crate::ground_truth::LogisticParams::new(CONTOUR_JUMP_ALPHA)?;
    let (w, h) = (disp_gt.width(), disp_gt.height());
    let mut target = Tensor::zeros(3, h, w);
    let mut mask = Tensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let d = disp_gt.get(x, y, 0) as f64;
            let du = if x + 1 < w {
                disp_gt.get(x + 1, y, 0) as f64 - d
            } else {
                0.0
            };
            let dv = if y + 1 < h {
                disp_gt.get(x, y + 1, 0) as f64 - d
            } else {
                0.0
            };
            let jump = (du * du + dv * dv).sqrt();
            let p = crate::ground_truth::logistic(jump, &alpha);
            target.set(0, y, x, p);
            mask.set(0, y, x, color_mask.get(x, y, 0) as f64);
            if p > 0.5 && jump > 1e-9 {
                target.set(1, y, x, du / jump);
                target.set(2, y, x, dv / jump);
                mask.set(1, y, x, 1.0);
                mask.set(2, y, x, 1.0);
            }
        }
    }
    Ok((target, mask))
}

/// High-resolution scenes are downscaled to this width before patches are
/// sampled, so the receptive field covers a consistent scene fraction.
pub const TRAIN_MAX_WIDTH: usize = 800;

/// Loads one dataset scene into tensors for the given head. Scenes wider
/// than [`TRAIN_MAX_WIDTH`] are downscaled (bilinear; the loss mask with
/// nearest sampling so its values stay in {1, weight}).
pub fn load_scene_tensors(dir: &Path, head: HeadKind) -> Result<SceneTensors> {
    let shrink = |img: &MultiChannelImage| image::resize_to_width(img, TRAIN_MAX_WIDTH);
    let shrink_nearest = |img: &MultiChannelImage| -> MultiChannelImage {
        if img.width() <= TRAIN_MAX_WIDTH {
            return img.clone();
        }
        let scale = img.width() as f64 / TRAIN_MAX_WIDTH as f64;
        let h = ((img.height() as f64 / scale).round() as usize).max(1);
        MultiChannelImage::from_fn(TRAIN_MAX_WIDTH, h, img.channels(), |x, y, c| {
            let sx = ((x as f64 + 0.5) * scale - 0.5).round().max(0.0) as usize;
            let sy = ((y as f64 + 0.5) * (img.height() as f64 / h as f64) - 0.5)
                .round()
                .max(0.0) as usize;
            img.get(sx.min(img.width() - 1), sy.min(img.height() - 1), c)
        })
    };
    let color = shrink(&io::read_ppm(&dir.join("color.ppm"))?);
    let disp_est = shrink(&io::read_pfm(&dir.join("disp_est.pfm"))?);
    let normals_est = shrink(&io::read_pfm(&dir.join("normals_est.pfm"))?);
    let input = assemble_input(&color, &disp_est, &normals_est)?;
    match head {
        HeadKind::Edge => {
            let edges = shrink(&io::read_pfm(&dir.join("edges_gt.pfm"))?);
            let mask = shrink_nearest(&io::read_pfm(&dir.join("mask.pfm"))?);
            Ok(SceneTensors {
                input,
                target: Tensor::from_image(&edges),
                mask: Tensor::from_image(&mask),
            })
        }
        HeadKind::ContourDirection => {
            let disp_gt = shrink(&io::read_pfm(&dir.join("disp_gt.pfm"))?);
            let color_mask = shrink_nearest(&io::read_pfm(&dir.join("mask.pfm"))?);
            let (target, mask) = make_contour_direction_target(&disp_gt, &color_mask)?;
            Ok(SceneTensors {
                input,
                target,
                mask,
            })
        }
    }
}

/// Aligned random crop of input/target/mask.
pub fn sample_patch(
    scene: &SceneTensors,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneTensors> {
    let (w, h) = (scene.input.width, scene.input.height);
    if w < patch || h < patch {
        return Err(Error::Shape(format!(
            "scene {w}x{h} is smaller than the {patch}-px patch; regenerate larger scenes or \
             shrink the patch"
        )));
    }
    let x0 = rng.random_range(0..=w - patch);
    let y0 = rng.random_range(0..=h - patch);
    Ok(SceneTensors {
        input: scene.input.crop(x0, y0, patch, patch),
        target: scene.target.crop(x0, y0, patch, patch),
        mask: scene.mask.crop(x0, y0, patch, patch),
    })
}

/// Center crop used for the deterministic validation loss.
fn center_patch(scene: &SceneTensors, patch: usize) -> SceneTensors {
    let x0 = (scene.input.width - patch) / 2;
    let y0 = (scene.input.height - patch) / 2;
    SceneTensors {
        input: scene.input.crop(x0, y0, patch, patch),
        target: scene.target.crop(x0, y0, patch, patch),
        mask: scene.mask.crop(x0, y0, patch, patch),
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

/// Serializes the loss log as `epoch,train_loss,val_loss` CSV.
pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for row in log {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.train, row.val));
    }
    out
}

/// Trains a fresh network on the dataset. Scenes are split deterministically
/// (the trailing `val_fraction` of the manifest order is validation); each
/// epoch samples one random patch per training scene and steps Adam per
/// batch. Aborts with a diagnostic if the loss goes non-finite.
pub fn train(
    manifest: &DatasetManifest,
    arch: &super::ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkParameters, Vec<EpochLoss>)> {
    cfg.validate()?;
    arch.validate()?;
    if cfg.patch_size % arch.spatial_multiple() != 0 {
        return Err(Error::Config(format!(
            "patch size {} must be a multiple of {}",
            cfg.patch_size,
            arch.spatial_multiple()
        )));
    }

    let scenes: Vec<SceneTensors> = manifest
        .scenes
        .iter()
        .map(|e| load_scene_tensors(&e.dir, arch.head))
        .collect::<Result<_>>()?;
    let n_val = ((scenes.len() as f64 * cfg.val_fraction).ceil() as usize).min(scenes.len() - 1);
    let n_train = scenes.len() - n_val;
    if n_train == 0 {
        return Err(Error::Config("no training scenes after validation split".into()));
    }

    let mut params = NetworkParameters::init(arch, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7ea1));
    let mut log = Vec::with_capacity(cfg.epochs);

    // Two-stage schedule: the final quarter of the epochs runs at 0.3x the
    // learning rate to settle the plateau.
    let decay_from = cfg.epochs - cfg.epochs / 4;

    for epoch in 0..cfg.epochs {
        let epoch_cfg = if epoch >= decay_from {
            TrainConfig {
                learning_rate: cfg.learning_rate * 0.3,
                ..cfg.clone()
            }
        } else {
            cfg.clone()
        };
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);

        let mut train_loss_sum = 0.0;
        let mut train_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let patch = sample_patch(&scenes[si], cfg.patch_size, &mut rng)?;
                inputs.push(patch.input);
                targets.push(patch.target);
                masks.push(patch.mask);
            }
            let (outputs, cache) = forward_batch(&params, &inputs, Mode::Train)?;
            let batch_loss = loss(&outputs, &targets, &masks)?;
            if !batch_loss.is_finite() {
                let layer = first_non_finite_layer(&cache);
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}; first non-finite activation in {layer}"
                )));
            }
            let grad_out = loss_gradient(&outputs, &targets, &masks)?;
            let grads = backward_batch(&params, &cache, &grad_out, cfg.l2_lambda)?;
            update_running_stats(&mut params, &cache);
            adam_step(&mut params, &grads, &mut adam, &epoch_cfg);
            train_loss_sum += batch_loss;
            train_batches += 1;
        }
        params.check_finite()?;

        // Deterministic validation loss on center crops.
        let val_loss = if n_val > 0 {
            let mut sum = 0.0;
            for scene in &scenes[n_train..] {
                let patch = center_patch(scene, cfg.patch_size.min(scene.input.width).min(scene.input.height));
                let (outputs, _) = forward_batch(&params, &[patch.input], Mode::Infer)?;
                sum += loss(&outputs, &[patch.target], &[patch.mask])?;
            }
            sum / n_val as f64
        } else {
            f64::NAN
        };

        log.push(EpochLoss {
            epoch,
            train: train_loss_sum / train_batches.max(1) as f64,
            val: val_loss,
        });
    }

    Ok((params, log))
}

fn first_non_finite_layer(cache: &ForwardCache) -> String {
    for (i, lc) in cache.enc.iter().enumerate() {
        if lc.pre_act.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return format!("encoder layer {i}");
        }
    }
    for (j, lc) in cache.dec.iter().enumerate() {
        if lc.pre_act.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return format!("decoder layer {j}");
        }
    }
    "the loss itself".into()
}

/// Runs the network on a full-resolution input: the image is padded by edge
/// replication to the next spatial multiple, pushed through in inference
/// mode, and cropped back.
pub fn infer(params: &NetworkParameters, input: &Tensor) -> Result<MultiChannelImage> {
    let multiple = params.config.spatial_multiple();
    let (w, h) = (input.width, input.height);
    if w == 0 || h == 0 {
        return Err(Error::Shape("empty inference input".into()));
    }
    let pw = w.div_ceil(multiple) * multiple;
    let ph = h.div_ceil(multiple) * multiple;
    let padded = if (pw, ph) == (w, h) {
        input.clone()
    } else {
        input.pad_replicate_to(pw, ph)
    };
    let (outputs, _) = forward_batch(params, &[padded], Mode::Infer)?;
    let out = outputs.into_iter().next().expect("one output per input");
    let cropped = out.crop(0, 0, w, h);
    Ok(cropped.to_image())
}

/// Splits a contour+direction head output into the contour probability map
/// and a unit direction field (zero where the contour probability is at or
/// below `threshold`).
pub fn normalized_directions(
    output: &MultiChannelImage,
    threshold: f32,
) -> Result<(MultiChannelImage, MultiChannelImage)> {
    if output.channels() != 3 {
        return Err(Error::Shape(format!(
            "contour+direction output needs 3 channels, got {}",
            output.channels()
        )));
    }
    let (w, h) = (output.width(), output.height());
    let contour = output.extract_channel(0);
    let mut dirs = MultiChannelImage::new(w, h, 2);
    for y in 0..h {
        for x in 0..w {
            if contour.get(x, y, 0) > threshold {
                let du = output.get(x, y, 1) as f64;
                let dv = output.get(x, y, 2) as f64;
                let norm = (du * du + dv * dv).sqrt();
                if norm > 1e-6 {
                    dirs.set(x, y, 0, (du / norm) as f32);
                    dirs.set(x, y, 1, (dv / norm) as f32);
                }
            }
        }
    }
    Ok((contour, dirs))
}
