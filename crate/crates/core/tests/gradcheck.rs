//! Finite-difference verification of every differentiable building block and
//! of composed networks.

use depth_edges::net::gradcheck::{finite_difference_check, training_objective};
use depth_edges::net::{ArchitectureConfig, HeadKind, NetworkParameters, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(c, h, w);
    for v in &mut t.data {
        *v = rng.random_range(-scale..scale);
    }
    t
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    cfg: &ArchitectureConfig,
    size: usize,
) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let inputs: Vec<Tensor> = (0..n)
        .map(|_| random_tensor(rng, cfg.input_channels, size, size, 1.0))
        .collect();
    let targets: Vec<Tensor> = (0..n)
        .map(|_| {
            let mut t = random_tensor(rng, cfg.head.channels(), size, size, 0.5);
            for v in &mut t.data {
                *v = v.abs();
            }
            t
        })
        .collect();
    let masks: Vec<Tensor> = (0..n)
        .map(|_| {
            let mut m = Tensor::zeros(cfg.head.channels(), size, size);
            for v in &mut m.data {
                *v = if rng.random_range(0.0..1.0) < 0.2 { 10.0 } else { 1.0 };
            }
            m
        })
        .collect();
    (inputs, targets, masks)
}

#[test]
fn composed_tiny_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut total_checked = 0usize;
    let mut worst = 0.0f64;
    for (draw, &(n_enc, bn)) in [(2usize, true), (2, false), (1, true), (3, false)]
        .iter()
        .cycle()
        .take(8)
        .enumerate()
    {
        let mut cfg = ArchitectureConfig {
            input_channels: 3,
            encoder_widths: (0..n_enc).map(|i| 3 + i).collect(),
            kernel: 4,
            factor: 2,
            leaky_slope: 0.2,
            head: if draw % 2 == 0 {
                HeadKind::Edge
            } else {
                HeadKind::ContourDirection
            },
            batch_norm: vec![bn; 2 * n_enc],
        };
        // Keep the head free of batch norm, matching the default masks.
        if let Some(last) = cfg.batch_norm.last_mut() {
            *last = false;
        }
        let params = NetworkParameters::init(&cfg, 100 + draw as u64).unwrap();
        // Feature maps must keep a few pixels per channel, otherwise batch
        // statistics over one or two values make the objective near-singular.
        let size = cfg.spatial_multiple().max(8);
        let (inputs, targets, masks) = random_batch(&mut rng, 2, &cfg, size);
        let report =
            finite_difference_check(&params, &inputs, &targets, &masks, 1e-5, 1e-3).unwrap();
        assert!(
            report.checked > 50,
            "draw {draw}: too few checkable parameters ({})",
            report.checked
        );
        assert!(
            report.max_rel_err < 1e-4,
            "draw {draw}: max relative error {} over {} params (worst {:?})",
            report.max_rel_err,
            report.checked,
            report.worst
        );
        total_checked += report.checked;
        worst = worst.max(report.max_rel_err);
    }
    println!("gradcheck: {total_checked} parameters checked, worst rel err {worst:.3e}");
}

#[test]
fn l2_term_is_the_only_gradient_for_zero_loss_gradient() {
    // With target == output the data gradient vanishes and only 2*lambda*p
    // remains.
    let cfg = ArchitectureConfig {
        input_channels: 2,
        encoder_widths: vec![3],
        kernel: 4,
        factor: 2,
        leaky_slope: 0.2,
        head: HeadKind::Edge,
        batch_norm: vec![false, false],
    };
    let params = NetworkParameters::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = random_tensor(&mut rng, 2, 4, 4, 1.0);
    let (outputs, _) =
        depth_edges::net::forward_batch(&params, &[input.clone()], depth_edges::net::Mode::Train)
            .unwrap();
    let targets = outputs.clone();
    let masks = vec![Tensor {
        channels: 1,
        height: 4,
        width: 4,
        data: vec![1.0; 16],
    }];
    let lambda = 1e-3;
    let grads = depth_edges::net::gradcheck::analytic_gradients(
        &params,
        &[input],
        &targets,
        &masks,
        lambda,
    )
    .unwrap();
    for (lg, layer) in grads.layers.iter().zip(&params.layers) {
        for (g, p) in lg.weights.iter().zip(&layer.weights) {
            assert!((g - 2.0 * lambda * p).abs() < 1e-12);
        }
        for (g, p) in lg.bias.iter().zip(&layer.bias) {
            assert!((g - 2.0 * lambda * p).abs() < 1e-12);
        }
    }
}

#[test]
fn objective_is_deterministic() {
    let cfg = ArchitectureConfig::desk(2, HeadKind::Edge);
    let params = NetworkParameters::init(&cfg, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (inputs, targets, masks) = random_batch(&mut rng, 2, &cfg, 8);
    let (a, _) = training_objective(&params, &inputs, &targets, &masks, 1e-5).unwrap();
    let (b, _) = training_objective(&params, &inputs, &targets, &masks, 1e-5).unwrap();
    assert_eq!(a, b);
}
