//! Cross-module integration tests: network locality and mode invariants,
//! ground-truth fidelity against the rasterizer's analytic masks, hierarchy
//! reproduction of scene structure, and pyramid-vs-flat refinement.

use depth_edges::eval;
use depth_edges::ground_truth::{self, GroundTruthConfig, NormalSource};
use depth_edges::image::MultiChannelImage;
use depth_edges::net::{self, ArchitectureConfig, HeadKind, Mode, NetworkParameters, Tensor};
use depth_edges::refine::{self, RefineConfig};
use depth_edges::scene::{self, Primitive, SceneSpec, Texture};
use depth_edges::segment;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A single-pixel perturbation outside the bottleneck feature's theoretical
/// receptive field leaves that feature unchanged.
#[test]
fn bottleneck_receptive_field_is_local() {
    let n_enc = 2;
    let cfg = ArchitectureConfig {
        input_channels: 2,
        encoder_widths: vec![4, 6],
        kernel: 4,
        factor: 2,
        leaky_slope: 0.2,
        head: HeadKind::Edge,
        batch_norm: vec![false; 2 * n_enc],
    };
    let params = NetworkParameters::init(&cfg, 61).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut base = Tensor::zeros(2, 16, 16);
    for v in &mut base.data {
        *v = rng.random_range(-1.0..1.0);
    }

    let bottleneck = |input: &Tensor| -> Vec<f64> {
        let (_, cache) = net::forward_batch(&params, &[input.clone()], Mode::Infer).unwrap();
        let t = &cache.enc[n_enc - 1].pre_act[0];
        (0..t.channels).map(|c| t.get(c, 0, 0)).collect()
    };
    let reference = bottleneck(&base);

    // The (0, 0) bottleneck feature of two stride-2 4x4 layers with 1-px
    // padding reads input rows/cols -1..=6 only. A perturbation at (15, 15)
    // is far outside; one at (2, 2) is inside.
    let mut far = base.clone();
    let idx = far.idx(0, 15, 15);
    far.data[idx] += 10.0;
    assert_eq!(bottleneck(&far), reference);

    let mut near = base.clone();
    let idx = near.idx(0, 2, 2);
    near.data[idx] += 10.0;
    assert_ne!(bottleneck(&near), reference);
}

/// Layers without batch norm behave identically in training and inference
/// modes.
#[test]
fn batch_norm_free_network_is_mode_invariant() {
    let cfg = ArchitectureConfig {
        input_channels: 3,
        encoder_widths: vec![4, 8],
        kernel: 4,
        factor: 2,
        leaky_slope: 0.2,
        head: HeadKind::ContourDirection,
        batch_norm: vec![false; 4],
    };
    let params = NetworkParameters::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut input = Tensor::zeros(3, 8, 8);
    for v in &mut input.data {
        *v = rng.random_range(-1.0..1.0);
    }
    let (train_out, _) = net::forward_batch(&params, &[input.clone()], Mode::Train).unwrap();
    let (infer_out, _) = net::forward_batch(&params, &[input], Mode::Infer).unwrap();
    assert_eq!(train_out[0].data, infer_out[0].data);

    // Head ranges: channel 0 sigmoid in [0,1], channels 1-2 tanh in [-1,1].
    let plane = 64;
    for (i, &v) in train_out[0].data.iter().enumerate() {
        if i < plane {
            assert!((0.0..=1.0).contains(&v));
        } else {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}

/// Ground truth evaluated on a clean rendered box scene recovers the
/// rasterizer's analytic contour and crease masks with f1 above 0.95 at 2-px
/// slack.
#[test]
fn ground_truth_matches_rasterizer_masks_on_box_scene() {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        primitives: vec![
            Primitive::Background {
                disparity: 6.0,
                slope: (0.01, -0.005),
                texture: Texture::flat([0.5, 0.5, 0.5]),
            },
            Primitive::BoxPrism {
                rect: [20.0, 30.0, 56.0, 70.0],
                disparity: 18.0,
                side: Some((12.0, 0.4)),
                top: Some((10.0, 0.4)),
                texture: Texture::flat([0.7, 0.5, 0.3]),
            },
            Primitive::Sphere {
                center: (70.0, 28.0),
                radius: 14.0,
                disparity: 24.0,
                texture: Texture::flat([0.3, 0.5, 0.8]),
            },
        ],
        light: [0.2, 0.3, 0.93],
        seed: 9,
    };
    let rendered = scene::render(&spec).unwrap();
    let bundle = ground_truth::make_ground_truth(
        &rendered.disparity,
        NormalSource::Image(&rendered.normals),
        &GroundTruthConfig::direct(),
    )
    .unwrap();

    let pred = bundle.edge.image().map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let mask_union = MultiChannelImage::from_fn(96, 96, 1, |x, y, _| {
        if rendered.contour_mask.get(x, y, 0) > 0.5 || rendered.crease_mask.get(x, y, 0) > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let pr = eval::boundary_pr(&pred, &mask_union, 2).unwrap();
    assert!(
        pr.f1 > 0.95,
        "edge probability vs analytic masks: f1 {:.4} (P {:.4} R {:.4})",
        pr.f1,
        pr.precision,
        pr.recall
    );
}

/// Segmenting the clean ground-truth edges of a two-object scene reproduces
/// the two-object partition at some threshold. The object is slanted with a
/// moderate disparity gap so the edge probabilities stay strictly below
/// saturation: saturated arcs tie at exactly 1.0 in f32 and degenerate merge
/// ordering can then skip the two-region level entirely.
#[test]
fn clean_edges_reproduce_two_object_partition() {
    let spec = SceneSpec {
        width: 64,
        height: 64,
        primitives: vec![
            Primitive::Background {
                disparity: 5.0,
                slope: (0.0, 0.0),
                texture: Texture::flat([0.5, 0.5, 0.5]),
            },
            Primitive::Rect {
                rect: [18.0, 18.0, 45.0, 45.0],
                disparity: 7.0,
                slope: (0.07, 0.04),
                texture: Texture::flat([0.8, 0.3, 0.3]),
            },
        ],
        light: [0.0, 0.0, 1.0],
        seed: 4,
    };
    let rendered = scene::render(&spec).unwrap();
    let bundle = ground_truth::make_ground_truth(
        &rendered.disparity,
        NormalSource::Image(&rendered.normals),
        &GroundTruthConfig::direct(),
    )
    .unwrap();
    let hierarchy = segment::build_ucm(segment::watershed(bundle.edge.image()).unwrap());
    // Every partition in the hierarchy appears just above some merge level.
    let mut counts: Vec<usize> = hierarchy
        .merges
        .iter()
        .map(|m| hierarchy.region_count_at(m.strength + 1e-9))
        .collect();
    counts.push(hierarchy.region_count_at(0.0));
    assert!(
        counts.contains(&2),
        "no threshold yields the 2-object partition: {counts:?}"
    );
}

/// Three pyramid levels beat (or match within 5%) a single-level solve given
/// the same total iteration budget, measured by edge-band RMSE.
#[test]
fn pyramid_refinement_beats_flat_solve_at_equal_budget() {
    let spec = scene::random_scene(421, 64, 64);
    let rendered = scene::render(&spec).unwrap();
    let est = scene::corrupt(&rendered, &scene::CorruptionSpec::default(), 33).unwrap();
    let ones = MultiChannelImage::splat(64, 64, 1, 1.0);
    let (target, _) = net::make_contour_direction_target(&rendered.disparity, &ones).unwrap();
    let timg = target.to_image();
    let contour = timg.extract_channel(0);
    let dirs = MultiChannelImage::from_fn(64, 64, 2, |x, y, c| timg.get(x, y, c + 1));

    let band_rmse = |disp: &MultiChannelImage| -> f64 {
        let (mut sq, mut n) = (0.0f64, 0usize);
        for y in 0..64usize {
            for x in 0..64usize {
                let mut near = false;
                'probe: for dy in -4i64..=4 {
                    for dx in -4i64..=4 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0
                            && ny >= 0
                            && nx < 64
                            && ny < 64
                            && rendered.contour_mask.get(nx as usize, ny as usize, 0) > 0.5
                        {
                            near = true;
                            break 'probe;
                        }
                    }
                }
                if near {
                    let e = disp.get(x, y, 0) as f64 - rendered.disparity.get(x, y, 0) as f64;
                    sq += e * e;
                    n += 1;
                }
            }
        }
        (sq / n as f64).sqrt()
    };

    // 3 levels x 5 Gauss-Newton iterations vs one level x 15.
    let pyramid_cfg = RefineConfig {
        max_gauss_newton: 5,
        ..RefineConfig::default()
    };
    let multi = refine::multiscale_refine(&est.disparity, &contour, &dirs, 3, &pyramid_cfg).unwrap();
    let flat_cfg = RefineConfig {
        max_gauss_newton: 15,
        ..RefineConfig::default()
    };
    let flat = refine::multiscale_refine(&est.disparity, &contour, &dirs, 1, &flat_cfg).unwrap();

    let rmse_multi = band_rmse(&multi.disparity);
    let rmse_flat = band_rmse(&flat.disparity);
    assert!(
        rmse_multi <= rmse_flat * 1.05,
        "pyramid {rmse_multi:.4} vs flat {rmse_flat:.4}"
    );
}
