//! Analytic depth-edge probabilities from clean disparity and normal maps.
//!
//! A depth *contour* is an approximate C0 discontinuity of the disparity; its
//! probability is a logistic squashing of the positive part of the Laplacian
//! of the disparity gradient magnitude. A depth *crease* is a strong change of
//! surface orientation, measured as the summed gradient magnitudes of the
//! three normal components over the image plane (scale-invariant by
//! construction). The two combine into a depth-edge probability with a
//! noisy-or.
//!
//! Normals can also be reconstructed from disparity given camera intrinsics:
//! the point cloud is rebuilt, median-filtered, differentiated into surface
//! tangents, and their cross products yield camera-facing unit normals.

use crate::error::{Error, Result};
use crate::image::{self, FilterSpec, MultiChannelImage};

/// Default logistic center for contour probabilities.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Default logistic center for crease probabilities.
pub const DEFAULT_BETA: f64 = 0.5;
/// Fixed logistic sharpness.
pub const LOGISTIC_SHARPNESS: f64 = 10.0;

/// Parameters of the squashing logistic `1 / (1 + exp(-k (x/center - 1)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticParams {
    pub center: f64,
    pub sharpness: f64,
}

impl LogisticParams {
    pub fn new(center: f64) -> Result<Self> {
        if center <= 0.0 {
            return Err(Error::Config(format!(
                "logistic center must be positive, got {center}"
            )));
        }
        Ok(LogisticParams {
            center,
            sharpness: LOGISTIC_SHARPNESS,
        })
    }

    pub fn alpha_default() -> Self {
        LogisticParams::new(DEFAULT_ALPHA).unwrap()
    }

    pub fn beta_default() -> Self {
        LogisticParams::new(DEFAULT_BETA).unwrap()
    }
}

/// Monotone logistic squashing; 0.5 exactly at `x == center`.
pub fn logistic(x: f64, p: &LogisticParams) -> f64 {
    1.0 / (1.0 + (-p.sharpness * (x / p.center - 1.0)).exp())
}

/// Which probability an [`EdgeProbabilityMap`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMapKind {
    Contour,
    Crease,
    Edge,
    NetworkOutput,
}

/// Single-channel raster of probabilities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProbabilityMap {
    image: MultiChannelImage,
    kind: EdgeMapKind,
}

impl EdgeProbabilityMap {
    pub fn new(image: MultiChannelImage, kind: EdgeMapKind) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::Shape(format!(
                "edge probability maps are single-channel, got {}",
                image.channels()
            )));
        }
        if !image.is_probability_map() {
            return Err(Error::Input(
                "edge probability map has samples outside [0, 1]".into(),
            ));
        }
        Ok(EdgeProbabilityMap { image, kind })
    }

    pub fn image(&self) -> &MultiChannelImage {
        &self.image
    }

    pub fn kind(&self) -> EdgeMapKind {
        self.kind
    }

    pub fn into_image(self) -> MultiChannelImage {
        self.image
    }
}

/// Discretization of the Laplace operator used by the contour definition.
#[derive(Debug, Clone, PartialEq)]
pub enum LaplacianKind {
    /// 5-point stencil; exact on quadratics, sharp on discrete steps.
    FivePoint,
    /// Difference-of-Gaussians rescaled by `2 / (sigma_narrow^2 - sigma_wide^2)`
    /// to approximate the Laplacian; suited to noisy data.
    DifferenceOfGaussians { sigma_narrow: f64, sigma_wide: f64 },
}

/// Contour probability configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourConfig {
    pub alpha: LogisticParams,
    pub gradient: FilterSpec,
    pub laplacian: LaplacianKind,
}

/// Crease probability configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CreaseConfig {
    pub beta: LogisticParams,
    pub gradient: FilterSpec,
}

/// Full ground-truth recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthConfig {
    pub contour: ContourConfig,
    pub crease: CreaseConfig,
}

impl GroundTruthConfig {
    /// Direct evaluation of the definitions: central differences and the
    /// 5-point Laplacian. The right recipe for clean synthetic data.
    pub fn direct() -> Self {
        GroundTruthConfig {
            contour: ContourConfig {
                alpha: LogisticParams::alpha_default(),
                gradient: FilterSpec::CentralDifference,
                laplacian: LaplacianKind::FivePoint,
            },
            crease: CreaseConfig {
                beta: LogisticParams::beta_default(),
                gradient: FilterSpec::CentralDifference,
            },
        }
    }

    /// Smoothed recipe for data with residual noise: derivative-of-Gaussian
    /// gradients followed by a difference-of-Gaussians Laplacian.
    pub fn smoothed() -> Self {
        GroundTruthConfig {
            contour: ContourConfig {
                alpha: LogisticParams::alpha_default(),
                gradient: FilterSpec::DerivativeOfGaussian { sigma: 1.5 },
                laplacian: LaplacianKind::DifferenceOfGaussians {
                    sigma_narrow: 1.5,
                    sigma_wide: 2.4,
                },
            },
            crease: CreaseConfig {
                beta: LogisticParams::beta_default(),
                gradient: FilterSpec::DerivativeOfGaussian { sigma: 1.5 },
            },
        }
    }
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig::direct()
    }
}

/// Laplacian under the selected discretization.
fn apply_laplacian(img: &MultiChannelImage, kind: &LaplacianKind) -> Result<MultiChannelImage> {
    match kind {
        LaplacianKind::FivePoint => image::laplacian(img),
        LaplacianKind::DifferenceOfGaussians {
            sigma_narrow,
            sigma_wide,
        } => {
            if *sigma_narrow >= *sigma_wide {
                return Err(Error::Config(format!(
                    "difference-of-Gaussians Laplacian needs sigma_narrow < sigma_wide, \
                     got {sigma_narrow} >= {sigma_wide}"
                )));
            }
            let dog = image::filter(
                img,
                &FilterSpec::DifferenceOfGaussians {
                    sigma_narrow: *sigma_narrow,
                    sigma_wide: *sigma_wide,
                },
            )?;
            let scale = 2.0 / (sigma_narrow * sigma_narrow - sigma_wide * sigma_wide);
            Ok(dog.map(|v| (v as f64 * scale) as f32))
        }
    }
}

/// Central-difference gradient magnitude that shrinks to full one-sided
/// differences at image borders, so linear ramps have exactly constant
/// magnitude everywhere (replicate padding would halve border derivatives and
/// fabricate contour response on ramps).
fn shrinking_gradient_magnitude(img: &MultiChannelImage) -> MultiChannelImage {
    let (w, h) = (img.width(), img.height());
    MultiChannelImage::from_fn(w, h, 1, |x, y, _| {
        let v = |sx: usize, sy: usize| img.get(sx, sy, 0) as f64;
        let gx = if x == 0 {
            v(1.min(w - 1), y) - v(0, y)
        } else if x == w - 1 {
            v(x, y) - v(x - 1, y)
        } else {
            (v(x + 1, y) - v(x - 1, y)) * 0.5
        };
        let gy = if y == 0 {
            v(x, 1.min(h - 1)) - v(x, 0)
        } else if y == h - 1 {
            v(x, y) - v(x, y - 1)
        } else {
            (v(x, y + 1) - v(x, y - 1)) * 0.5
        };
        (gx * gx + gy * gy).sqrt() as f32
    })
}

/// Depth-contour probability: logistic of the positive part of the Laplacian
/// of the disparity gradient magnitude.
pub fn depth_contour_prob(
    disparity: &MultiChannelImage,
    cfg: &ContourConfig,
) -> Result<EdgeProbabilityMap> {
    if disparity.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(
            "disparity contains NaN/inf samples; inpaint or mask before computing contours".into(),
        ));
    }
    if disparity.channels() != 1 {
        return Err(Error::Shape(format!(
            "disparity must be single-channel, got {}",
            disparity.channels()
        )));
    }
    let mag = if cfg.gradient == FilterSpec::CentralDifference {
        shrinking_gradient_magnitude(disparity)
    } else {
        image::gradient_magnitude(disparity, &cfg.gradient)?
    };
    let lap = apply_laplacian(&mag, &cfg.laplacian)?;
    let mut out = MultiChannelImage::new(disparity.width(), disparity.height(), 1);
    for (o, &l) in out.data_mut().iter_mut().zip(lap.data()) {
        let positive = (l as f64).max(0.0);
        *o = logistic(positive, &cfg.alpha) as f32;
    }
    EdgeProbabilityMap::new(out, EdgeMapKind::Contour)
}

/// Whether a normal pixel is defined (undefined pixels carry the zero vector).
#[inline]
fn normal_defined(n: &MultiChannelImage, x: usize, y: usize) -> bool {
    let nx = n.get(x, y, 0);
    let ny = n.get(x, y, 1);
    let nz = n.get(x, y, 2);
    nx * nx + ny * ny + nz * nz > 0.25
}

/// Central-difference gradient magnitude of one channel that shrinks its
/// stencil near undefined pixels rather than reading through them.
fn masked_gradient_magnitude(n: &MultiChannelImage, c: usize) -> MultiChannelImage {
    let (w, h) = (n.width(), n.height());
    let mut out = MultiChannelImage::new(w, h, 1);
    let sample = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            return None;
        }
        let (xc, yc) = (x as usize, y as usize);
        normal_defined(n, xc, yc).then(|| n.get(xc, yc, c) as f64)
    };
    let diff = |minus: Option<f64>, center: f64, plus: Option<f64>| -> f64 {
        match (minus, plus) {
            (Some(m), Some(p)) => (p - m) * 0.5,
            (None, Some(p)) => p - center,
            (Some(m), None) => center - m,
            (None, None) => 0.0,
        }
    };
    for y in 0..h {
        for x in 0..w {
            if !normal_defined(n, x, y) {
                continue;
            }
            let center = n.get(x, y, c) as f64;
            let (xi, yi) = (x as isize, y as isize);
            let gx = diff(sample(xi - 1, yi), center, sample(xi + 1, yi));
            let gy = diff(sample(xi, yi - 1), center, sample(xi, yi + 1));
            out.set(x, y, 0, (gx * gx + gy * gy).sqrt() as f32);
        }
    }
    out
}

/// Depth-crease probability: logistic of the summed gradient magnitudes of the
/// three normal components. Normals that break the unit-norm invariant beyond
/// 1e-3 are renormalized before differentiation.
pub fn depth_crease_prob(
    normals: &MultiChannelImage,
    cfg: &CreaseConfig,
) -> Result<EdgeProbabilityMap> {
    if normals.channels() != 3 {
        return Err(Error::Shape(format!(
            "crease probability needs a 3-channel normal image, got {}",
            normals.channels()
        )));
    }
    let deviation = normals.max_normal_deviation()?;
    let n = if deviation > 1e-3 {
        renormalize(normals)
    } else {
        normals.clone()
    };

    let (w, h) = (n.width(), n.height());
    let has_undefined = (0..h).any(|y| (0..w).any(|x| !normal_defined(&n, x, y)));
    let mut sum = MultiChannelImage::new(w, h, 1);
    for c in 0..3 {
        let mag = if has_undefined || cfg.gradient == FilterSpec::CentralDifference {
            masked_gradient_magnitude(&n, c)
        } else {
            image::gradient_magnitude(&n.extract_channel(c), &cfg.gradient)?
        };
        for (s, &m) in sum.data_mut().iter_mut().zip(mag.data()) {
            *s += m;
        }
    }
    let mut out = MultiChannelImage::new(w, h, 1);
    for (o, &s) in out.data_mut().iter_mut().zip(sum.data()) {
        *o = logistic(s as f64, &cfg.beta) as f32;
    }
    EdgeProbabilityMap::new(out, EdgeMapKind::Crease)
}

fn renormalize(normals: &MultiChannelImage) -> MultiChannelImage {
    let mut out = normals.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let nx = out.get(x, y, 0) as f64;
            let ny = out.get(x, y, 1) as f64;
            let nz = out.get(x, y, 2) as f64;
            let norm = (nx * nx + ny * ny + nz * nz).sqrt();
            if norm > 0.0 {
                out.set(x, y, 0, (nx / norm) as f32);
                out.set(x, y, 1, (ny / norm) as f32);
                out.set(x, y, 2, (nz / norm) as f32);
            }
        }
    }
    out
}

/// Noisy-or combination of contour and crease probabilities.
pub fn combine_edge_prob(
    contour: &EdgeProbabilityMap,
    crease: &EdgeProbabilityMap,
) -> Result<EdgeProbabilityMap> {
    let (pc, pr) = (contour.image(), crease.image());
    if pc.width() != pr.width() || pc.height() != pr.height() {
        return Err(Error::Shape(format!(
            "contour {}x{} vs crease {}x{}",
            pc.width(),
            pc.height(),
            pr.width(),
            pr.height()
        )));
    }
    let mut out = MultiChannelImage::new(pc.width(), pc.height(), 1);
    for (o, (&a, &b)) in out.data_mut().iter_mut().zip(pc.data().iter().zip(pr.data())) {
        let v = 1.0 - (1.0 - a as f64) * (1.0 - b as f64);
        *o = v as f32;
    }
    EdgeProbabilityMap::new(out, EdgeMapKind::Edge)
}

/// Pinhole camera for disparity-to-point reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point in pixels.
    pub principal: (f64, f64),
    /// Baseline times focal length: `depth = disparity_scale / disparity`.
    pub disparity_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, principal: (f64, f64), disparity_scale: f64) -> Result<Self> {
        if focal <= 0.0 || disparity_scale <= 0.0 {
            return Err(Error::Config(format!(
                "focal length and disparity scale must be positive, got {focal}, {disparity_scale}"
            )));
        }
        Ok(CameraIntrinsics {
            focal,
            principal,
            disparity_scale,
        })
    }

    /// 3-D point for pixel `(u, v)` at disparity `d`. The camera looks along
    /// -z, so depths are negative z and camera-facing normals have positive z.
    pub fn reconstruct(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        let z = self.disparity_scale / d;
        [
            (u - self.principal.0) * z / self.focal,
            (v - self.principal.1) * z / self.focal,
            -z,
        ]
    }
}

/// Median window radius of the point-cloud / normal smoothing (15x15).
pub const NORMAL_MEDIAN_RADIUS: usize = 7;

/// Reconstructs camera-facing unit normals from a disparity map.
///
/// Nonpositive or non-finite disparities are undefined; their output normal
/// is the zero vector and derivative stencils shrink around them. The
/// reconstructed point cloud and the resulting normals are both median
/// filtered (window `2 * median_radius + 1`).
pub fn normals_from_disparity(
    disparity: &MultiChannelImage,
    cam: &CameraIntrinsics,
    median_radius: usize,
) -> Result<MultiChannelImage> {
    if disparity.channels() != 1 {
        return Err(Error::Shape(format!(
            "disparity must be single-channel, got {}",
            disparity.channels()
        )));
    }
    let (w, h) = (disparity.width(), disparity.height());
    let defined = |x: usize, y: usize| -> bool {
        let d = disparity.get(x, y, 0);
        d.is_finite() && d > 0.0
    };

    // Point cloud, media-filtered per component over defined pixels.
    let mut points = MultiChannelImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            if defined(x, y) {
                let p = cam.reconstruct(x as f64, y as f64, disparity.get(x, y, 0) as f64);
                points.set(x, y, 0, p[0] as f32);
                points.set(x, y, 1, p[1] as f32);
                points.set(x, y, 2, p[2] as f32);
            }
        }
    }
    let points = masked_median(&points, &defined, median_radius);

    // Tangents along the image axes, normals from their cross products.
    let mut normals = MultiChannelImage::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            if !defined(x, y) {
                continue;
            }
            let tu = masked_tangent(&points, &defined, x, y, 1, 0);
            let tv = masked_tangent(&points, &defined, x, y, 0, 1);
            let (tu, tv) = match (tu, tv) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            };
            let mut n = cross(tu, tv);
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if norm == 0.0 {
                continue;
            }
            for v in &mut n {
                *v /= norm;
            }
            // Orient toward the camera at the origin.
            let p = [
                points.get(x, y, 0) as f64,
                points.get(x, y, 1) as f64,
                points.get(x, y, 2) as f64,
            ];
            let toward_camera = -(n[0] * p[0] + n[1] * p[1] + n[2] * p[2]);
            if toward_camera < 0.0 {
                for v in &mut n {
                    *v = -*v;
                }
            }
            normals.set(x, y, 0, n[0] as f32);
            normals.set(x, y, 1, n[1] as f32);
            normals.set(x, y, 2, n[2] as f32);
        }
    }

    let normals = masked_median(&normals, &defined, median_radius);
    Ok(renormalize(&normals))
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Central-difference tangent of the point cloud along `(dx, dy)`, falling
/// back to one-sided differences at undefined neighbors or borders.
fn masked_tangent(
    points: &MultiChannelImage,
    defined: &dyn Fn(usize, usize) -> bool,
    x: usize,
    y: usize,
    dx: isize,
    dy: isize,
) -> Option<[f64; 3]> {
    let (w, h) = (points.width() as isize, points.height() as isize);
    let probe = |sx: isize, sy: isize| -> Option<[f64; 3]> {
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            return None;
        }
        let (ux, uy) = (sx as usize, sy as usize);
        defined(ux, uy).then(|| {
            [
                points.get(ux, uy, 0) as f64,
                points.get(ux, uy, 1) as f64,
                points.get(ux, uy, 2) as f64,
            ]
        })
    };
    let center = probe(x as isize, y as isize)?;
    let plus = probe(x as isize + dx, y as isize + dy);
    let minus = probe(x as isize - dx, y as isize - dy);
    match (minus, plus) {
        (Some(m), Some(p)) => Some([(p[0] - m[0]) * 0.5, (p[1] - m[1]) * 0.5, (p[2] - m[2]) * 0.5]),
        (None, Some(p)) => Some([p[0] - center[0], p[1] - center[1], p[2] - center[2]]),
        (Some(m), None) => Some([center[0] - m[0], center[1] - m[1], center[2] - m[2]]),
        (None, None) => None,
    }
}

/// Per-channel median over the defined pixels of the window; undefined output
/// wherever the center pixel is undefined.
fn masked_median(
    img: &MultiChannelImage,
    defined: &dyn Fn(usize, usize) -> bool,
    radius: usize,
) -> MultiChannelImage {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    let mut out = MultiChannelImage::new(w, h, img.channels());
    let mut window = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                if !defined(x, y) {
                    continue;
                }
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        if defined(sx, sy) {
                            window.push(img.get(sx, sy, c));
                        }
                    }
                }
                window.sort_by(|a, b| a.total_cmp(b));
                out.set(x, y, c, window[window.len() / 2]);
            }
        }
    }
    out
}

/// Normal source for ground-truth generation.
pub enum NormalSource<'a> {
    /// Clean normal image.
    Image(&'a MultiChannelImage),
    /// Reconstruct normals from the disparity map with these intrinsics.
    Camera(CameraIntrinsics),
}

/// Contour, crease and combined edge probabilities.
pub struct GroundTruthBundle {
    pub contour: EdgeProbabilityMap,
    pub crease: EdgeProbabilityMap,
    pub edge: EdgeProbabilityMap,
}

/// Evaluates the full depth-edge definition on clean inputs.
pub fn make_ground_truth(
    disparity: &MultiChannelImage,
    normals: NormalSource<'_>,
    cfg: &GroundTruthConfig,
) -> Result<GroundTruthBundle> {
    let contour = depth_contour_prob(disparity, &cfg.contour)?;
    let normal_img;
    let normal_ref = match normals {
        NormalSource::Image(n) => n,
        NormalSource::Camera(cam) => {
            normal_img = normals_from_disparity(disparity, &cam, NORMAL_MEDIAN_RADIUS)?;
            &normal_img
        }
    };
    let crease = depth_crease_prob(normal_ref, &cfg.crease)?;
    let edge = combine_edge_prob(&contour, &crease)?;
    Ok(GroundTruthBundle {
        contour,
        crease,
        edge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_fixed_points() {
        let alpha = LogisticParams::alpha_default();
        assert_eq!(logistic(1.0, &alpha), 0.5);
        // 1 / (1 + e^10) and 1 / (1 + e^-10), evaluated independently.
        let low = 1.0 / (1.0 + 10f64.exp());
        let high = 1.0 / (1.0 + (-10f64).exp());
        assert!((logistic(0.0, &alpha) - low).abs() < 1e-12);
        assert!((logistic(2.0, &alpha) - high).abs() < 1e-12);
        assert!((low - 4.54e-5).abs() < 1e-6);
        assert!((high - 0.99995).abs() < 1e-5);
        // Strictly increasing over the non-saturated range.
        let mut prev = logistic(-0.5, &alpha);
        for i in 1..=60 {
            let v = logistic(-0.5 + i as f64 * 0.05, &alpha);
            assert!(v > prev);
            prev = v;
        }
        assert!(LogisticParams::new(0.0).is_err());
    }

    #[test]
    fn contour_prob_on_plane_and_constant() {
        let cfg = GroundTruthConfig::direct().contour;
        let plane =
            MultiChannelImage::from_fn(16, 12, 1, |x, y, _| 3.0 + 0.5 * x as f32 - 0.25 * y as f32);
        let pc = depth_contour_prob(&plane, &cfg).unwrap();
        assert!(pc.image().data().iter().all(|&v| v < 1e-4));

        let flat = MultiChannelImage::splat(10, 10, 1, 4.0);
        let pc = depth_contour_prob(&flat, &cfg).unwrap();
        let sigma0 = logistic(0.0, &cfg.alpha) as f32;
        assert!(pc.image().data().iter().all(|&v| (v - sigma0).abs() < 1e-7));
    }

    #[test]
    fn contour_prob_on_step_edge() {
        let cfg = GroundTruthConfig::direct().contour;
        let step =
            MultiChannelImage::from_fn(32, 16, 1, |x, _, _| if x < 16 { 4.0 } else { 14.0 });
        let pc = depth_contour_prob(&step, &cfg).unwrap();
        // Ridge within 2 px of the step between x=15 and x=16.
        let mut peak = 0.0f32;
        for y in 0..16 {
            for x in 14..18 {
                peak = peak.max(pc.image().get(x, y, 0));
            }
        }
        assert!(peak > 0.9, "peak {peak}");
        // Background far from the edge stays low.
        for y in 0..16 {
            for x in 0..32 {
                if !(13..=18).contains(&x) {
                    assert!(pc.image().get(x, y, 0) < 1e-3);
                }
            }
        }
    }

    #[test]
    fn contour_prob_is_shift_invariant() {
        let cfg = GroundTruthConfig::direct().contour;
        let base = MultiChannelImage::from_fn(12, 12, 1, |x, y, _| {
            ((x * 7 + y * 3) % 5) as f32 + if x > 6 { 9.0 } else { 0.0 }
        });
        let shifted = base.map(|v| v + 123.5);
        let a = depth_contour_prob(&base, &cfg).unwrap();
        let b = depth_contour_prob(&shifted, &cfg).unwrap();
        for (x, y) in a.image().data().iter().zip(b.image().data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn contour_prob_rejects_nan() {
        let cfg = GroundTruthConfig::direct().contour;
        let mut img = MultiChannelImage::splat(4, 4, 1, 1.0);
        img.set(2, 2, 0, f32::NAN);
        assert!(matches!(
            depth_contour_prob(&img, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dog_laplacian_is_exact_on_quadratics() {
        let kind = LaplacianKind::DifferenceOfGaussians {
            sigma_narrow: 1.5,
            sigma_wide: 2.4,
        };
        let img = MultiChannelImage::from_fn(48, 48, 1, |x, _, _| {
            let u = x as f64 - 24.0;
            (u * u) as f32
        });
        let lap = apply_laplacian(&img, &kind).unwrap();
        // Interior far from the replicated border.
        for y in 12..36 {
            for x in 12..36 {
                assert!(
                    (lap.get(x, y, 0) - 2.0).abs() < 0.05,
                    "at {x},{y}: {}",
                    lap.get(x, y, 0)
                );
            }
        }
    }

    #[test]
    fn crease_prob_on_constant_and_junction() {
        let cfg = GroundTruthConfig::direct().crease;
        let flat = MultiChannelImage::from_fn(12, 10, 3, |_, _, c| if c == 2 { 1.0 } else { 0.0 });
        let pr = depth_crease_prob(&flat, &cfg).unwrap();
        let sigma0 = logistic(0.0, &cfg.beta) as f32;
        assert!(pr.image().data().iter().all(|&v| (v - sigma0).abs() < 1e-6));

        // Two half-planes of normals meeting at x = 8.
        let s = (2.0f32).sqrt() / 2.0;
        let junction = MultiChannelImage::from_fn(16, 10, 3, |x, _, c| {
            let n = if x < 8 { [0.0, 0.0, 1.0] } else { [s, 0.0, s] };
            n[c]
        });
        let pr = depth_crease_prob(&junction, &cfg).unwrap();
        for y in 0..10 {
            let ridge = pr.image().get(7, y, 0).max(pr.image().get(8, y, 0));
            assert!(ridge > 0.4, "ridge {ridge}");
            assert!(pr.image().get(2, y, 0) < 1e-4);
            assert!(pr.image().get(13, y, 0) < 1e-4);
        }
    }

    #[test]
    fn crease_prob_renormalizes_bad_normals() {
        let cfg = GroundTruthConfig::direct().crease;
        // Same directions, wrong lengths: after renormalization this is a
        // constant field, so creases stay at the logistic floor.
        let img = MultiChannelImage::from_fn(8, 8, 3, |x, _, c| {
            let scale = 1.0 + 0.3 * (x % 3) as f32;
            if c == 2 {
                scale
            } else {
                0.0
            }
        });
        let pr = depth_crease_prob(&img, &cfg).unwrap();
        let sigma0 = logistic(0.0, &cfg.beta) as f32;
        assert!(pr.image().data().iter().all(|&v| (v - sigma0).abs() < 1e-6));
    }

    #[test]
    fn combine_edge_prob_cases() {
        let mk = |v: f32, kind| {
            EdgeProbabilityMap::new(MultiChannelImage::splat(3, 3, 1, v), kind).unwrap()
        };
        let zero = mk(0.0, EdgeMapKind::Contour);
        let zero_r = mk(0.0, EdgeMapKind::Crease);
        let combined = combine_edge_prob(&zero, &zero_r).unwrap();
        assert!(combined.image().data().iter().all(|&v| v == 0.0));

        let one = mk(1.0, EdgeMapKind::Contour);
        let any = mk(0.3, EdgeMapKind::Crease);
        let combined = combine_edge_prob(&one, &any).unwrap();
        assert!(combined.image().data().iter().all(|&v| v == 1.0));

        let half_c = mk(0.5, EdgeMapKind::Contour);
        let half_r = mk(0.5, EdgeMapKind::Crease);
        let combined = combine_edge_prob(&half_c, &half_r).unwrap();
        assert!(combined.image().data().iter().all(|&v| (v - 0.75).abs() < 1e-7));

        // P_e >= max(P_c, P_r) pointwise, and monotone in P_c.
        let a = mk(0.4, EdgeMapKind::Contour);
        let b = mk(0.2, EdgeMapKind::Crease);
        let e1 = combine_edge_prob(&a, &b).unwrap();
        assert!(e1.image().data()[0] >= 0.4);
        let a2 = mk(0.6, EdgeMapKind::Contour);
        let e2 = combine_edge_prob(&a2, &b).unwrap();
        assert!(e2.image().data()[0] > e1.image().data()[0]);

        let small = mk(0.1, EdgeMapKind::Crease);
        let wrong = EdgeProbabilityMap::new(MultiChannelImage::splat(2, 2, 1, 0.1), EdgeMapKind::Contour)
            .unwrap();
        assert!(combine_edge_prob(&wrong, &small).is_err());
    }

    #[test]
    fn normals_from_constant_disparity_are_fronto_parallel() {
        let cam = CameraIntrinsics::new(64.0, (8.0, 8.0), 128.0).unwrap();
        let d = MultiChannelImage::splat(17, 17, 1, 4.0);
        let n = normals_from_disparity(&d, &cam, 2).unwrap();
        for y in 0..17 {
            for x in 0..17 {
                assert!((n.get(x, y, 0)).abs() < 1e-5);
                assert!((n.get(x, y, 1)).abs() < 1e-5);
                assert!((n.get(x, y, 2) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normals_from_slanted_plane_match_analytic_oracle() {
        // Planar disparity <=> planar 3-D surface; the analytic normal comes
        // from two exact chords of the reconstructed plane.
        let cam = CameraIntrinsics::new(64.0, (12.0, 12.0), 128.0).unwrap();
        let disp = |u: f64, _v: f64| 5.0 + 0.15 * u;
        let d = MultiChannelImage::from_fn(25, 25, 1, |x, y, _| disp(x as f64, y as f64) as f32);

        let p0 = cam.reconstruct(0.0, 0.0, disp(0.0, 0.0));
        let p1 = cam.reconstruct(20.0, 0.0, disp(20.0, 0.0));
        let p2 = cam.reconstruct(0.0, 20.0, disp(0.0, 20.0));
        let chord_u = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let chord_v = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let mut expect = cross(chord_u, chord_v);
        let norm = (expect[0] * expect[0] + expect[1] * expect[1] + expect[2] * expect[2]).sqrt();
        for v in &mut expect {
            *v /= norm;
        }
        if expect[2] < 0.0 {
            for v in &mut expect {
                *v = -*v;
            }
        }

        let n = normals_from_disparity(&d, &cam, 2).unwrap();
        for y in 2..23 {
            for x in 2..23 {
                for c in 0..3 {
                    assert!(
                        (n.get(x, y, c) as f64 - expect[c]).abs() < 1e-2,
                        "at {x},{y},{c}: {} vs {}",
                        n.get(x, y, c),
                        expect[c]
                    );
                }
            }
        }
    }

    #[test]
    fn normals_mark_nonpositive_disparity_undefined() {
        let cam = CameraIntrinsics::new(32.0, (4.0, 4.0), 64.0).unwrap();
        let mut d = MultiChannelImage::splat(9, 9, 1, 4.0);
        d.set(4, 4, 0, 0.0);
        d.set(5, 4, 0, -1.0);
        let n = normals_from_disparity(&d, &cam, 1).unwrap();
        for &(x, y) in &[(4usize, 4usize), (5, 4)] {
            assert_eq!(n.get(x, y, 0), 0.0);
            assert_eq!(n.get(x, y, 1), 0.0);
            assert_eq!(n.get(x, y, 2), 0.0);
        }
        // Defined pixels still fronto-parallel.
        assert!((n.get(1, 1, 2) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ground_truth_on_flat_background_is_quiet() {
        let cam = CameraIntrinsics::new(64.0, (8.0, 8.0), 128.0).unwrap();
        let d = MultiChannelImage::splat(17, 17, 1, 6.0);
        let bundle = make_ground_truth(
            &d,
            NormalSource::Camera(cam),
            &GroundTruthConfig::direct(),
        )
        .unwrap();
        assert!(bundle.edge.image().data().iter().all(|&v| v < 1e-3));
    }
}
