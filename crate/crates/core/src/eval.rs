//! Boundary quality evaluation: precision/recall with a slack radius, PR
//! curves over hierarchy thresholds, ODS/OIS summaries, and the data-agnostic
//! baselines the trained fusion is compared against.

use crate::error::{Error, Result};
use crate::ground_truth::{
    self, EdgeMapKind, EdgeProbabilityMap, GroundTruthConfig,
};
use crate::image::{self, FilterSpec, MultiChannelImage};
use crate::segment::{boundary_map, SegmentationHierarchy};

/// Matching counts behind a precision/recall pair; aggregable across images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoundaryCounts {
    pub pred_matched: usize,
    pub pred_total: usize,
    pub gt_matched: usize,
    pub gt_total: usize,
}

impl BoundaryCounts {
    pub fn add(&mut self, other: &BoundaryCounts) {
        self.pred_matched += other.pred_matched;
        self.pred_total += other.pred_total;
        self.gt_matched += other.gt_matched;
        self.gt_total += other.gt_total;
    }

    /// Precision is 1 for an empty prediction (no false positives), recall
    /// is 1 for an empty ground truth.
    pub fn precision(&self) -> f64 {
        if self.pred_total == 0 {
            1.0
        } else {
            self.pred_matched as f64 / self.pred_total as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt_total == 0 {
            1.0
        } else {
            self.gt_matched as f64 / self.gt_total as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

/// Boundary precision/recall at one hierarchy threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPR {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub slack_radius: usize,
    pub counts: BoundaryCounts,
}

/// Morphological dilation by a disc of the given radius.
fn dilate_disc(map: &MultiChannelImage, radius: usize) -> Vec<bool> {
    let (w, h) = (map.width(), map.height());
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                offsets.push((dx, dy));
            }
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if map.get(x, y, 0) == 0.0 {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Precision/recall of binary boundary maps with a disc slack: a predicted
/// pixel counts when it lies within `slack_radius` of any ground-truth pixel,
/// and symmetrically for recall.
pub fn boundary_pr(
    pred: &MultiChannelImage,
    gt: &MultiChannelImage,
    slack_radius: usize,
) -> Result<BoundaryPR> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape(format!(
            "boundary maps differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if pred.channels() != 1 || gt.channels() != 1 {
        return Err(Error::Shape("boundary maps must be single-channel".into()));
    }
    let (w, h) = (pred.width(), pred.height());
    let gt_dilated = dilate_disc(gt, slack_radius);
    let pred_dilated = dilate_disc(pred, slack_radius);
    let mut counts = BoundaryCounts::default();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if pred.get(x, y, 0) != 0.0 {
                counts.pred_total += 1;
                if gt_dilated[i] {
                    counts.pred_matched += 1;
                }
            }
            if gt.get(x, y, 0) != 0.0 {
                counts.gt_total += 1;
                if pred_dilated[i] {
                    counts.gt_matched += 1;
                }
            }
        }
    }
    Ok(BoundaryPR {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        threshold: f64::NAN,
        slack_radius,
        counts,
    })
}

/// Default slack radius at desk scale (128-px canvases).
pub const DEFAULT_SLACK_RADIUS: usize = 2;
/// Default threshold count for PR curves.
pub const DEFAULT_THRESHOLDS: usize = 33;

/// Uniform thresholds over [0, 1].
pub fn uniform_thresholds(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count).map(|i| i as f64 / (count - 1) as f64).collect()
}

/// PR at every threshold: the prediction at `t` is the 1-px region-boundary
/// map of the thresholded hierarchy.
pub fn pr_curve(
    hierarchy: &SegmentationHierarchy,
    gt_boundary: &MultiChannelImage,
    thresholds: &[f64],
    slack_radius: usize,
) -> Result<Vec<BoundaryPR>> {
    let ws = &hierarchy.watershed;
    thresholds
        .iter()
        .map(|&t| {
            let labels = hierarchy.threshold_segmentation(t);
            let pred = boundary_map(&labels, ws.width, ws.height);
            let mut pr = boundary_pr(&pred, gt_boundary, slack_radius)?;
            pr.threshold = t;
            Ok(pr)
        })
        .collect()
}

/// Dataset summary: f1 at the single best shared threshold (ODS, from
/// dataset-aggregated counts) and the mean of per-image best f1 (OIS).
pub fn ods_ois(per_image_curves: &[Vec<BoundaryPR>]) -> Result<(f64, f64)> {
    if per_image_curves.is_empty() {
        return Err(Error::Input("ODS/OIS over zero images".into()));
    }
    let n_thresholds = per_image_curves[0].len();
    if n_thresholds == 0 {
        return Err(Error::Input("empty PR curve".into()));
    }
    if per_image_curves
        .iter()
        .any(|c| c.len() != n_thresholds)
    {
        return Err(Error::Shape(
            "per-image PR curves must share the threshold list".into(),
        ));
    }

    let mut ods = 0.0f64;
    for ti in 0..n_thresholds {
        let mut agg = BoundaryCounts::default();
        for curve in per_image_curves {
            agg.add(&curve[ti].counts);
        }
        ods = ods.max(agg.f1());
    }

    let ois = per_image_curves
        .iter()
        .map(|curve| curve.iter().map(|pr| pr.f1).fold(0.0, f64::max))
        .sum::<f64>()
        / per_image_curves.len() as f64;

    Ok((ods, ois))
}

/// Hand-defined fusion baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Contour formula applied to the corrupted disparity estimate alone.
    SingleDisparity,
    /// Crease formula applied to the corrupted normal estimate alone.
    SingleNormals,
    /// Normalized large-kernel gradient of the color luminance alone.
    SingleColor,
    /// Normalized sum of large-kernel gradient responses across all channels.
    DataAgnostic,
}

/// Sigma of the "large fixed kernels" used by the data-agnostic rules.
pub const BASELINE_KERNEL_SIGMA: f64 = 2.0;

fn luminance(color: &MultiChannelImage) -> MultiChannelImage {
    MultiChannelImage::from_fn(color.width(), color.height(), 1, |x, y, _| {
        0.299 * color.get(x, y, 0) + 0.587 * color.get(x, y, 1) + 0.114 * color.get(x, y, 2)
    })
}

/// Gradient magnitude with a large derivative-of-Gaussian kernel, normalized
/// to peak 1.
fn normalized_gradient_response(channel: &MultiChannelImage) -> Result<MultiChannelImage> {
    let mag = image::gradient_magnitude(
        channel,
        &FilterSpec::DerivativeOfGaussian {
            sigma: BASELINE_KERNEL_SIGMA,
        },
    )?;
    let (_, hi) = mag.min_max();
    // A flat channel's response is pure rounding residue; normalizing it
    // would amplify noise to full scale.
    if hi <= 1e-9 {
        return Ok(MultiChannelImage::new(channel.width(), channel.height(), 1));
    }
    Ok(mag.map(move |v| v / hi))
}

/// Manually defined channel fusion, the baseline family the trained network
/// is evaluated against.
pub fn baseline_fuse(
    color: &MultiChannelImage,
    disparity: &MultiChannelImage,
    normals: &MultiChannelImage,
    mode: BaselineMode,
) -> Result<EdgeProbabilityMap> {
    match mode {
        BaselineMode::SingleDisparity => {
            let cfg = GroundTruthConfig::direct();
            let pc = ground_truth::depth_contour_prob(disparity, &cfg.contour)?;
            EdgeProbabilityMap::new(pc.into_image(), EdgeMapKind::NetworkOutput)
        }
        BaselineMode::SingleNormals => {
            let cfg = GroundTruthConfig::direct();
            let pr = ground_truth::depth_crease_prob(normals, &cfg.crease)?;
            EdgeProbabilityMap::new(pr.into_image(), EdgeMapKind::NetworkOutput)
        }
        BaselineMode::SingleColor => {
            let response = normalized_gradient_response(&luminance(color))?;
            EdgeProbabilityMap::new(response, EdgeMapKind::NetworkOutput)
        }
        BaselineMode::DataAgnostic => {
            let (w, h) = (color.width(), color.height());
            if disparity.width() != w
                || disparity.height() != h
                || normals.width() != w
                || normals.height() != h
            {
                return Err(Error::Shape("baseline channels are not aligned".into()));
            }
            let mut sum = MultiChannelImage::new(w, h, 1);
            let mut channels: Vec<MultiChannelImage> = Vec::new();
            for c in 0..3 {
                channels.push(color.extract_channel(c));
            }
            channels.push(disparity.clone());
            for c in 0..3 {
                channels.push(normals.extract_channel(c));
            }
            for channel in &channels {
                let response = normalized_gradient_response(channel)?;
                for (s, &v) in sum.data_mut().iter_mut().zip(response.data()) {
                    *s += v;
                }
            }
            let (_, hi) = sum.min_max();
            if hi > 0.0 {
                sum.map_inplace(move |v| v / hi);
            }
            EdgeProbabilityMap::new(sum, EdgeMapKind::NetworkOutput)
        }
    }
}

/// PR curve as `threshold,precision,recall,f1` CSV.
pub fn pr_curve_csv(curve: &[BoundaryPR]) -> String {
    let mut out = String::from("threshold,precision,recall,f1\n");
    for pr in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            pr.threshold, pr.precision, pr.recall, pr.f1
        ));
    }
    out
}

/// Aligned text table of per-method ODS/OIS scores.
pub fn summary_table(rows: &[(String, f64, f64)]) -> String {
    let name_width = rows
        .iter()
        .map(|(n, _, _)| n.len())
        .chain(std::iter::once("method".len()))
        .max()
        .unwrap_or(6);
    let mut out = format!("{:<name_width$}  {:>6}  {:>6}\n", "method", "ODS", "OIS");
    for (name, ods, ois) in rows {
        out.push_str(&format!(
            "{name:<name_width$}  {ods:>6.4}  {ois:>6.4}\n"
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{build_ucm, watershed};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_with(pixels: &[(usize, usize)], w: usize, h: usize) -> MultiChannelImage {
        let mut img = MultiChannelImage::new(w, h, 1);
        for &(x, y) in pixels {
            img.set(x, y, 0, 1.0);
        }
        img
    }

    #[test]
    fn identical_maps_score_perfectly() {
        let m = map_with(&[(1, 1), (2, 2), (3, 1)], 6, 5);
        let pr = boundary_pr(&m, &m, 2).unwrap();
        assert_eq!(pr.precision, 1.0);
        assert_eq!(pr.recall, 1.0);
        assert_eq!(pr.f1, 1.0);
    }

    #[test]
    fn empty_prediction_convention() {
        let empty = MultiChannelImage::new(5, 5, 1);
        let gt = map_with(&[(2, 2)], 5, 5);
        let pr = boundary_pr(&empty, &gt, 2).unwrap();
        assert_eq!(pr.precision, 1.0);
        assert_eq!(pr.recall, 0.0);
        assert_eq!(pr.f1, 0.0);
    }

    #[test]
    fn slack_radius_window() {
        // Pred at (2,2), gt at (2,4): distance 2.
        let pred = map_with(&[(2, 2)], 5, 5);
        let gt = map_with(&[(2, 4)], 5, 5);
        let pr2 = boundary_pr(&pred, &gt, 2).unwrap();
        assert_eq!((pr2.precision, pr2.recall), (1.0, 1.0));
        let pr1 = boundary_pr(&pred, &gt, 1).unwrap();
        assert_eq!((pr1.precision, pr1.recall), (0.0, 0.0));
    }

    #[test]
    fn swapping_maps_swaps_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MultiChannelImage::from_fn(8, 8, 1, |_, _, _| {
            if rng.random_range(0.0..1.0) < 0.2 { 1.0 } else { 0.0 }
        });
        let b = MultiChannelImage::from_fn(8, 8, 1, |_, _, _| {
            if rng.random_range(0.0..1.0) < 0.2 { 1.0 } else { 0.0 }
        });
        let ab = boundary_pr(&a, &b, 2).unwrap();
        let ba = boundary_pr(&b, &a, 2).unwrap();
        assert!((ab.precision - ba.recall).abs() < 1e-12);
        assert!((ab.recall - ba.precision).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..50 {
            let (w, h) = (8usize, 8usize);
            let radius = rng.random_range(1..=3usize);
            let pred = MultiChannelImage::from_fn(w, h, 1, |_, _, _| {
                if rng.random_range(0.0..1.0) < 0.15 { 1.0 } else { 0.0 }
            });
            let gt = MultiChannelImage::from_fn(w, h, 1, |_, _, _| {
                if rng.random_range(0.0..1.0) < 0.15 { 1.0 } else { 0.0 }
            });
            let pr = boundary_pr(&pred, &gt, radius).unwrap();

            // Oracle: nearest-pixel distance check,全 pairs.
            let pixels = |m: &MultiChannelImage| -> Vec<(isize, isize)> {
                let mut v = Vec::new();
                for y in 0..h {
                    for x in 0..w {
                        if m.get(x, y, 0) != 0.0 {
                            v.push((x as isize, y as isize));
                        }
                    }
                }
                v
            };
            let pp = pixels(&pred);
            let gp = pixels(&gt);
            let r2 = (radius * radius) as isize;
            let matched = |set: &[(isize, isize)], against: &[(isize, isize)]| -> usize {
                set.iter()
                    .filter(|&&(x, y)| {
                        against
                            .iter()
                            .any(|&(gx, gy)| (x - gx).pow(2) + (y - gy).pow(2) <= r2)
                    })
                    .count()
            };
            let expect_p = if pp.is_empty() {
                1.0
            } else {
                matched(&pp, &gp) as f64 / pp.len() as f64
            };
            let expect_r = if gp.is_empty() {
                1.0
            } else {
                matched(&gp, &pp) as f64 / gp.len() as f64
            };
            assert!(
                (pr.precision - expect_p).abs() < 1e-12,
                "trial {trial}: precision {} vs {expect_p}",
                pr.precision
            );
            assert!(
                (pr.recall - expect_r).abs() < 1e-12,
                "trial {trial}: recall {} vs {expect_r}",
                pr.recall
            );
        }
    }

    fn random_hierarchy(seed: u64) -> SegmentationHierarchy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = MultiChannelImage::from_fn(16, 16, 1, |_, _, _| {
            (rng.random_range(0..6) as f32) / 5.0
        });
        build_ucm(watershed(&map).unwrap())
    }

    #[test]
    fn recall_is_non_increasing_in_threshold() {
        for seed in 0..5u64 {
            let h = random_hierarchy(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5);
            let gt = MultiChannelImage::from_fn(16, 16, 1, |_, _, _| {
                if rng.random_range(0.0..1.0) < 0.2 { 1.0 } else { 0.0 }
            });
            let curve = pr_curve(&h, &gt, &uniform_thresholds(9), 2).unwrap();
            for pair in curve.windows(2) {
                assert!(
                    pair[1].recall <= pair[0].recall + 1e-12,
                    "recall increased with threshold"
                );
            }
        }
    }

    #[test]
    fn extreme_thresholds() {
        let h = random_hierarchy(1);
        let gt = map_with(&[(4, 4), (8, 8)], 16, 16);
        let curve = pr_curve(&h, &gt, &[0.0, 1.0], 2).unwrap();
        assert_eq!(curve.len(), 2);
        // Above the top merge everything is one region: empty boundary.
        let above = h.merges.last().map(|m| m.strength + 0.01).unwrap_or(1.0);
        let top = pr_curve(&h, &gt, &[above], 2).unwrap();
        assert_eq!(top[0].recall, 0.0);
        assert_eq!(top[0].precision, 1.0);
    }

    #[test]
    fn ods_ois_single_image_and_ordering() {
        let h = random_hierarchy(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = MultiChannelImage::from_fn(16, 16, 1, |_, _, _| {
            if rng.random_range(0.0..1.0) < 0.25 { 1.0 } else { 0.0 }
        });
        let curve = pr_curve(&h, &gt, &uniform_thresholds(11), 2).unwrap();
        let best = curve.iter().map(|p| p.f1).fold(0.0, f64::max);
        let (ods, ois) = ods_ois(std::slice::from_ref(&curve)).unwrap();
        assert!((ois - best).abs() < 1e-12);
        assert!((ods - best).abs() < 1e-12);

        // Two images: OIS >= ODS always.
        let h2 = random_hierarchy(8);
        let curve2 = pr_curve(&h2, &gt, &uniform_thresholds(11), 2).unwrap();
        let (ods, ois) = ods_ois(&[curve, curve2]).unwrap();
        assert!(ois >= ods - 1e-12);

        assert!(ods_ois(&[]).is_err());
    }

    #[test]
    fn ods_ois_matches_enumeration_on_hand_fixture() {
        // Two synthetic curves over 3 shared thresholds with known counts.
        let mk = |counts: [(usize, usize, usize, usize); 3]| -> Vec<BoundaryPR> {
            counts
                .iter()
                .enumerate()
                .map(|(i, &(pm, pt, gm, gt))| {
                    let c = BoundaryCounts {
                        pred_matched: pm,
                        pred_total: pt,
                        gt_matched: gm,
                        gt_total: gt,
                    };
                    BoundaryPR {
                        precision: c.precision(),
                        recall: c.recall(),
                        f1: c.f1(),
                        threshold: i as f64 / 2.0,
                        slack_radius: 2,
                        counts: c,
                    }
                })
                .collect()
        };
        let img1 = mk([(8, 10, 8, 10), (6, 6, 6, 10), (2, 2, 2, 10)]);
        let img2 = mk([(3, 10, 3, 10), (5, 7, 5, 10), (7, 8, 7, 10)]);
        let (ods, ois) = ods_ois(&[img1.clone(), img2.clone()]).unwrap();

        // Enumeration oracle.
        let mut expect_ods = 0.0f64;
        for ti in 0..3 {
            let mut agg = BoundaryCounts::default();
            agg.add(&img1[ti].counts);
            agg.add(&img2[ti].counts);
            expect_ods = expect_ods.max(agg.f1());
        }
        let expect_ois = (img1.iter().map(|p| p.f1).fold(0.0, f64::max)
            + img2.iter().map(|p| p.f1).fold(0.0, f64::max))
            / 2.0;
        assert!((ods - expect_ods).abs() < 1e-12);
        assert!((ois - expect_ois).abs() < 1e-12);
        assert!(ois >= ods);
    }

    #[test]
    fn data_agnostic_baseline_fires_on_clean_edges() {
        use crate::scene::{self, Primitive, SceneSpec, Texture};
        let spec = SceneSpec {
            width: 48,
            height: 48,
            primitives: vec![
                Primitive::Background {
                    disparity: 5.0,
                    slope: (0.0, 0.0),
                    texture: Texture::flat([0.4, 0.4, 0.4]),
                },
                Primitive::Rect {
                    rect: [14.0, 14.0, 33.0, 33.0],
                    disparity: 15.0,
                    slope: (0.0, 0.0),
                    texture: Texture::flat([0.8, 0.3, 0.3]),
                },
            ],
            light: [0.0, 0.0, 1.0],
            seed: 5,
        };
        let scene = scene::render_with_color(
            &spec,
            &scene::ColorModel {
                texture_contrast: 1.0,
                shadow_edge_strength: 0.0,
            },
        )
        .unwrap();
        let fused = baseline_fuse(
            &scene.color,
            &scene.disparity,
            &scene.normals,
            BaselineMode::DataAgnostic,
        )
        .unwrap();
        // High response near the square outline, quiet far away.
        let img = fused.image();
        let mut on_edge = 0.0f32;
        for x in 10..38 {
            on_edge = on_edge.max(img.get(x, 14, 0));
        }
        assert!(on_edge > 0.5, "edge response {on_edge}");
        assert!(img.get(4, 4, 0) < 0.1);
        assert!(img.get(24, 24, 0) < 0.1);
    }

    #[test]
    fn single_color_baseline_responds_to_texture() {
        // Strong checker texture on a flat plane: color baseline fires, the
        // disparity baseline stays quiet.
        use crate::scene::{Texture, TextureKind};
        let tex = Texture {
            kind: TextureKind::Checker { cell: 6.0 },
            albedo_a: [0.1, 0.1, 0.1],
            albedo_b: [0.9, 0.9, 0.9],
        };
        let color = MultiChannelImage::from_fn(32, 32, 3, |x, y, c| {
            let q = ((x as f64 / 6.0).floor() + (y as f64 / 6.0).floor()) as i64 % 2;
            if q == 0 {
                tex.albedo_a[c]
            } else {
                tex.albedo_b[c]
            }
        });
        let disparity = MultiChannelImage::splat(32, 32, 1, 6.0);
        let normals = MultiChannelImage::from_fn(32, 32, 3, |_, _, c| if c == 2 { 1.0 } else { 0.0 });
        let color_resp =
            baseline_fuse(&color, &disparity, &normals, BaselineMode::SingleColor).unwrap();
        let disp_resp =
            baseline_fuse(&color, &disparity, &normals, BaselineMode::SingleDisparity).unwrap();
        let frac = |m: &MultiChannelImage, thresh: f32| {
            m.data().iter().filter(|&&v| v > thresh).count() as f64 / m.data().len() as f64
        };
        let color_rate = frac(color_resp.image(), 0.5);
        let disp_rate = frac(disp_resp.image(), 0.5);
        assert!(
            color_rate > 10.0 * disp_rate.max(1e-6),
            "color {color_rate} vs disparity {disp_rate}"
        );
    }

    #[test]
    fn csv_and_table_formats() {
        let counts = BoundaryCounts {
            pred_matched: 1,
            pred_total: 2,
            gt_matched: 1,
            gt_total: 4,
        };
        let pr = BoundaryPR {
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            threshold: 0.5,
            slack_radius: 2,
            counts,
        };
        let csv = pr_curve_csv(&[pr]);
        assert!(csv.starts_with("threshold,precision,recall,f1\n"));
        assert!(csv.contains("0.5,0.5,0.25,"));

        let table = summary_table(&[("fused".into(), 0.8123, 0.8456)]);
        assert!(table.contains("method"));
        assert!(table.contains("0.8123"));
    }
}
