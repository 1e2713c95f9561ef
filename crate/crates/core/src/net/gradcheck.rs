//! Finite-difference verification of the analytic gradients.
//!
//! The check perturbs one parameter at a time by ±h, evaluates the full
//! training objective (masked MSE plus L2 term) in f64, and compares the
//! central difference against the backpropagated gradient. Leaky-ReLU kinks
//! make finite differences invalid when a pre-activation changes sign inside
//! the bracket; such brackets are detected exactly from the cached
//! pre-activations and skipped (subderivatives exist there, but no finite
//! difference converges to them).

use crate::error::Result;

use super::layers::{forward_batch, ForwardCache, Mode, Tensor};
use super::train::{backward_batch, loss, loss_gradient, param_squared_norm, Gradients};
use super::NetworkParameters;

/// Total training objective: masked MSE plus `lambda * ||p||^2`.
pub fn training_objective(
    params: &NetworkParameters,
    inputs: &[Tensor],
    targets: &[Tensor],
    masks: &[Tensor],
    l2_lambda: f64,
) -> Result<(f64, ForwardCache)> {
    let (outputs, cache) = forward_batch(params, inputs, Mode::Train)?;
    let data = loss(&outputs, targets, masks)?;
    Ok((data + l2_lambda * param_squared_norm(params), cache))
}

/// Analytic gradient of [`training_objective`].
pub fn analytic_gradients(
    params: &NetworkParameters,
    inputs: &[Tensor],
    targets: &[Tensor],
    masks: &[Tensor],
    l2_lambda: f64,
) -> Result<Gradients> {
    let (outputs, cache) = forward_batch(params, inputs, Mode::Train)?;
    let grad_out = loss_gradient(&outputs, targets, masks)?;
    backward_batch(params, &cache, &grad_out, l2_lambda)
}

/// Signs of every leaky-ReLU pre-activation, in a fixed traversal order.
fn sign_pattern(cache: &ForwardCache) -> Vec<bool> {
    let mut signs = Vec::new();
    for lc in cache.enc.iter().chain(cache.dec.iter()) {
        let tensors = lc.concat_pre_act.as_ref().unwrap_or(&lc.pre_act);
        for t in tensors {
            signs.extend(t.data.iter().map(|&v| v >= 0.0));
        }
    }
    signs
}

/// Outcome of a full finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// `(layer, tensor id, element, finite difference, analytic)` of the worst
    /// disagreement. Tensor ids: 0 weights, 1 bias, 2 gamma, 3 beta.
    pub worst: Option<(usize, usize, usize, f64, f64)>,
}

fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (a - b).abs() / denom.max(1e-6)
    }
}

/// Central-difference check of every trainable parameter.
pub fn finite_difference_check(
    params: &NetworkParameters,
    inputs: &[Tensor],
    targets: &[Tensor],
    masks: &[Tensor],
    l2_lambda: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(params, inputs, targets, masks, l2_lambda)?;
    let (_, center_cache) = training_objective(params, inputs, targets, masks, l2_lambda)?;
    let center_signs = sign_pattern(&center_cache);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    let n_layers = params.layers.len();
    for li in 0..n_layers {
        // (tensor id, length) pairs in the order mirrored by Gradients.
        let tensor_lens: Vec<(usize, usize)> = {
            let layer = &params.layers[li];
            let mut v = vec![(0, layer.weights.len()), (1, layer.bias.len())];
            if let Some(bn) = &layer.bn {
                v.push((2, bn.gamma.len()));
                v.push((3, bn.beta.len()));
            }
            v
        };
        for (tensor_id, len) in tensor_lens {
            for pi in 0..len {
                let read = |p: &NetworkParameters| -> f64 {
                    let l = &p.layers[li];
                    match tensor_id {
                        0 => l.weights[pi],
                        1 => l.bias[pi],
                        2 => l.bn.as_ref().unwrap().gamma[pi],
                        _ => l.bn.as_ref().unwrap().beta[pi],
                    }
                };
                let write = |p: &mut NetworkParameters, v: f64| {
                    let l = &mut p.layers[li];
                    match tensor_id {
                        0 => l.weights[pi] = v,
                        1 => l.bias[pi] = v,
                        2 => l.bn.as_mut().unwrap().gamma[pi] = v,
                        _ => l.bn.as_mut().unwrap().beta[pi] = v,
                    }
                };
                let original = read(&work);

                // 4th-order central difference at step h: kills the O(h^2)
                // truncation term that would otherwise drown small gradients.
                let mut values = [0.0f64; 4];
                let mut kinked = false;
                for (slot, offset) in [(0usize, -2.0), (1, -1.0), (2, 1.0), (3, 2.0)] {
                    write(&mut work, original + offset * h);
                    let (f, cache) = training_objective(&work, inputs, targets, masks, l2_lambda)?;
                    values[slot] = f;
                    if sign_pattern(&cache) != center_signs {
                        kinked = true;
                        break;
                    }
                }
                write(&mut work, original);
                if kinked {
                    report.skipped_kinks += 1;
                    continue;
                }

                let fd =
                    (values[0] - 8.0 * values[1] + 8.0 * values[2] - values[3]) / (12.0 * h);
                let ana = {
                    let lg = &analytic.layers[li];
                    match tensor_id {
                        0 => lg.weights[pi],
                        1 => lg.bias[pi],
                        2 => lg.gamma[pi],
                        _ => lg.beta[pi],
                    }
                };
                let rel = relative_error(fd, ana);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((li, tensor_id, pi, fd, ana));
                }
                report.checked += 1;
            }
        }
    }
    Ok(report)
}
