//! Procedural synthetic scenes with exact ground truth, plus structured
//! corruption models that imitate the error taxonomy of real stereo/mono
//! estimators (disocclusion bands, blur, quantization, texture leakage).
//!
//! Scenes are evaluated per pixel against analytic primitives with a
//! disparity z-buffer: every pixel receives the exact disparity, unit
//! camera-facing normal, face id and albedo of the nearest surface. Faces
//! with planar disparity are exact 3-D planes, so their normals are constant
//! and computed in closed form; spheres get per-pixel analytic normals from
//! ray intersection. No light transport is simulated.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ground_truth::{self, CameraIntrinsics, GroundTruthConfig, NormalSource};
use crate::image::{self, FilterSpec, MultiChannelImage};
use crate::io;
use crate::net;

/// Procedural albedo pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureKind {
    Flat,
    /// Screen-space checkerboard with the given cell size in pixels.
    Checker { cell: f64 },
    /// Screen-space stripes: `angle` radians, `period` pixels.
    Stripes { angle: f64, period: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub kind: TextureKind,
    pub albedo_a: [f32; 3],
    pub albedo_b: [f32; 3],
}

impl Texture {
    pub fn flat(albedo: [f32; 3]) -> Self {
        Texture {
            kind: TextureKind::Flat,
            albedo_a: albedo,
            albedo_b: albedo,
        }
    }

    /// Albedo at a pixel; `contrast` scales the difference between the two
    /// pattern colors.
    fn albedo(&self, u: f64, v: f64, contrast: f64) -> [f32; 3] {
        let t = match self.kind {
            TextureKind::Flat => 0.0,
            TextureKind::Checker { cell } => {
                let q = (u / cell).floor() + (v / cell).floor();
                q.rem_euclid(2.0).round()
            }
            TextureKind::Stripes { angle, period } => {
                let s = u * angle.cos() + v * angle.sin();
                (s / period).floor().rem_euclid(2.0).round()
            }
        };
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let a = self.albedo_a[c] as f64;
            let b = self.albedo_b[c] as f64;
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a) * contrast;
            out[c] = (mid - half + t * 2.0 * half) as f32;
        }
        out
    }
}

/// Scene primitives, parameterized directly in disparity space so the depth
/// ordering and ground-truth formulas stay exact.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Full-viewport plane; disparity varies linearly around the image center.
    Background {
        disparity: f64,
        slope: (f64, f64),
        texture: Texture,
    },
    /// Screen-space rectangle with planar disparity (a slanted plane when the
    /// slope is nonzero). `rect` is `[u0, v0, u1, v1]`.
    Rect {
        rect: [f64; 4],
        disparity: f64,
        slope: (f64, f64),
        texture: Texture,
    },
    /// Box seen at an oblique angle: fronto-parallel front face plus optional
    /// side/top faces sloping away in disparity, meeting the front at crease
    /// edges. Each face entry is `(extent_px, disparity_slope)`.
    BoxPrism {
        rect: [f64; 4],
        disparity: f64,
        side: Option<(f64, f64)>,
        top: Option<(f64, f64)>,
        texture: Texture,
    },
    /// Sphere given by screen center, screen radius and center disparity.
    Sphere {
        center: (f64, f64),
        radius: f64,
        disparity: f64,
        texture: Texture,
    },
}

/// Scene description: canvas, primitives (first must be a background), light
/// direction, and the seed it was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub primitives: Vec<Primitive>,
    pub light: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    /// Fixed pinhole camera: focal length = canvas width, principal point at
    /// the center, disparity scale = focal length.
    pub fn camera(&self) -> CameraIntrinsics {
        let f = self.width as f64;
        CameraIntrinsics::new(f, (self.width as f64 / 2.0, self.height as f64 / 2.0), f)
            .expect("fixed camera is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Input("scene has no primitives".into()));
        }
        if !matches!(self.primitives[0], Primitive::Background { .. }) {
            return Err(Error::Input(
                "the first primitive must be a background plane".into(),
            ));
        }
        Ok(())
    }
}

/// Appearance knobs for the rendered color channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorModel {
    /// Scales the contrast of procedural textures (0 disables texture edges).
    pub texture_contrast: f64,
    /// Strength of soft shadow bands painted into the color channel; these
    /// create color edges that do not coincide with depth edges.
    pub shadow_edge_strength: f64,
}

/// Corruption of the clean disparity into a stereo-like estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityCorruption {
    /// Width in pixels of the noisy band on the far (disoccluded) side of
    /// contours.
    pub band_width: usize,
    /// Noise sigma inside the disocclusion band, in disparity units.
    pub band_noise_sigma: f64,
    /// Global Gaussian blur sigma.
    pub blur_sigma: f64,
    /// Quantization step in disparity units (0 disables).
    pub quantization: f64,
}

/// Corruption of the clean normals into an estimator-like map.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalCorruption {
    /// Amplitude of color-texture leakage into the normal components.
    pub texture_leak: f64,
    /// Gaussian blur sigma applied per component.
    pub blur_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub disparity: DisparityCorruption,
    pub normal: NormalCorruption,
    pub color: ColorModel,
}

impl CorruptionSpec {
    /// No-op corruption: estimates equal the ground truth exactly.
    pub fn none() -> Self {
        CorruptionSpec {
            disparity: DisparityCorruption {
                band_width: 0,
                band_noise_sigma: 0.0,
                blur_sigma: 0.0,
                quantization: 0.0,
            },
            normal: NormalCorruption {
                texture_leak: 0.0,
                blur_sigma: 0.0,
            },
            color: ColorModel {
                texture_contrast: 1.0,
                shadow_edge_strength: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.disparity;
        let n = &self.normal;
        if d.band_noise_sigma < 0.0
            || d.blur_sigma < 0.0
            || d.quantization < 0.0
            || n.texture_leak < 0.0
            || n.blur_sigma < 0.0
            || self.color.texture_contrast < 0.0
            || self.color.shadow_edge_strength < 0.0
        {
            return Err(Error::Config("corruption parameters must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            disparity: DisparityCorruption {
                band_width: 5,
                band_noise_sigma: 3.0,
                blur_sigma: 1.0,
                quantization: 0.5,
            },
            normal: NormalCorruption {
                texture_leak: 1.0,
                blur_sigma: 2.0,
            },
            color: ColorModel {
                texture_contrast: 0.9,
                shadow_edge_strength: 0.45,
            },
        }
    }
}

/// Exact render output: color, disparity, normals and the analytic edge masks.
pub struct RenderedScene {
    pub color: MultiChannelImage,
    pub disparity: MultiChannelImage,
    pub normals: MultiChannelImage,
    pub contour_mask: MultiChannelImage,
    pub crease_mask: MultiChannelImage,
}

/// Surface sample of one primitive at one pixel.
struct Hit {
    disparity: f64,
    normal: [f64; 3],
    face: u8,
    albedo: [f32; 3],
}

/// Constant normal of a face whose disparity is affine in (u, v): the face is
/// an exact 3-D plane, so two reconstructed chords span it.
fn planar_normal(
    cam: &CameraIntrinsics,
    at: (f64, f64),
    disparity_at: impl Fn(f64, f64) -> f64,
) -> [f64; 3] {
    let (u, v) = at;
    let step = 8.0;
    let p0 = cam.reconstruct(u, v, disparity_at(u, v));
    let pu = cam.reconstruct(u + step, v, disparity_at(u + step, v));
    let pv = cam.reconstruct(u, v + step, disparity_at(u, v + step));
    let a = [pu[0] - p0[0], pu[1] - p0[1], pu[2] - p0[2]];
    let b = [pv[0] - p0[0], pv[1] - p0[1], pv[2] - p0[2]];
    let mut n = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    for c in &mut n {
        *c /= norm;
    }
    let toward = -(n[0] * p0[0] + n[1] * p0[1] + n[2] * p0[2]);
    if toward < 0.0 {
        for c in &mut n {
            *c = -*c;
        }
    }
    n
}

impl Primitive {
    fn hit(&self, cam: &CameraIntrinsics, u: f64, v: f64, contrast: f64) -> Option<Hit> {
        match self {
            Primitive::Background {
                disparity,
                slope,
                texture,
            } => {
                let d = |uu: f64, vv: f64| {
                    disparity + slope.0 * (uu - cam.principal.0) + slope.1 * (vv - cam.principal.1)
                };
                Some(Hit {
                    disparity: d(u, v),
                    normal: planar_normal(cam, (u, v), d),
                    face: 0,
                    albedo: texture.albedo(u, v, contrast),
                })
            }
            Primitive::Rect {
                rect,
                disparity,
                slope,
                texture,
            } => {
                if u < rect[0] || v < rect[1] || u > rect[2] || v > rect[3] {
                    return None;
                }
                let d = |uu: f64, vv: f64| {
                    disparity + slope.0 * (uu - rect[0]) + slope.1 * (vv - rect[1])
                };
                Some(Hit {
                    disparity: d(u, v),
                    normal: planar_normal(cam, (u, v), d),
                    face: 0,
                    albedo: texture.albedo(u, v, contrast),
                })
            }
            Primitive::BoxPrism {
                rect,
                disparity,
                side,
                top,
                texture,
            } => {
                let albedo = texture.albedo(u, v, contrast);
                let in_v = v >= rect[1] && v <= rect[3];
                if u >= rect[0] && u <= rect[2] && in_v {
                    let d = |_: f64, _: f64| *disparity;
                    return Some(Hit {
                        disparity: *disparity,
                        normal: planar_normal(cam, (u, v), d),
                        face: 0,
                        albedo,
                    });
                }
                if let Some((width, slope)) = side {
                    if in_v && u > rect[2] && u <= rect[2] + width {
                        let d = |uu: f64, _: f64| disparity - slope * (uu - rect[2]);
                        return Some(Hit {
                            disparity: d(u, v),
                            normal: planar_normal(cam, (u, v), d),
                            face: 1,
                            albedo,
                        });
                    }
                }
                if let Some((height, slope)) = top {
                    if u >= rect[0] && u <= rect[2] && v < rect[1] && v >= rect[1] - height {
                        let d = |_: f64, vv: f64| disparity - slope * (rect[1] - vv);
                        return Some(Hit {
                            disparity: d(u, v),
                            normal: planar_normal(cam, (u, v), d),
                            face: 2,
                            albedo,
                        });
                    }
                }
                None
            }
            Primitive::Sphere {
                center,
                radius,
                disparity,
                texture,
            } => {
                let zc = cam.disparity_scale / disparity;
                let c3 = [
                    (center.0 - cam.principal.0) * zc / cam.focal,
                    (center.1 - cam.principal.1) * zc / cam.focal,
                    -zc,
                ];
                let r3 = radius * zc / cam.focal;
                let mut dir = [
                    (u - cam.principal.0) / cam.focal,
                    (v - cam.principal.1) / cam.focal,
                    -1.0,
                ];
                let dn = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                for c in &mut dir {
                    *c /= dn;
                }
                let b = dir[0] * c3[0] + dir[1] * c3[1] + dir[2] * c3[2];
                let cc = c3[0] * c3[0] + c3[1] * c3[1] + c3[2] * c3[2] - r3 * r3;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let t = b - disc.sqrt();
                if t <= 0.0 {
                    return None;
                }
                let p = [t * dir[0], t * dir[1], t * dir[2]];
                let normal = [
                    (p[0] - c3[0]) / r3,
                    (p[1] - c3[1]) / r3,
                    (p[2] - c3[2]) / r3,
                ];
                Some(Hit {
                    disparity: cam.disparity_scale / (-p[2]),
                    normal,
                    face: 0,
                    albedo: texture.albedo(u, v, contrast),
                })
            }
        }
    }
}

/// Minimum disparity gap between surfaces for a pixel pair to count as a
/// contour in the analytic masks.
pub const CONTOUR_GAP: f64 = 1.0;

/// Renders a scene with the given color model.
pub fn render_with_color(spec: &SceneSpec, color_model: &ColorModel) -> Result<RenderedScene> {
    spec.validate()?;
    let cam = spec.camera();
    let (w, h) = (spec.width, spec.height);

    let mut disparity = MultiChannelImage::new(w, h, 1);
    let mut normals = MultiChannelImage::new(w, h, 3);
    let mut color = MultiChannelImage::new(w, h, 3);
    // Winner surface per pixel: (primitive index, face id).
    let mut surface: Vec<(u16, u8)> = vec![(0, 0); w * h];

    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64, y as f64);
            let mut best: Option<(usize, Hit)> = None;
            for (pi, prim) in spec.primitives.iter().enumerate() {
                if let Some(hit) = prim.hit(&cam, u, v, color_model.texture_contrast) {
                    if hit.disparity <= 0.0 {
                        return Err(Error::Input(format!(
                            "primitive {pi} has nonpositive disparity {} at ({x},{y})",
                            hit.disparity
                        )));
                    }
                    let better = match &best {
                        Some((_, b)) => hit.disparity > b.disparity,
                        None => true,
                    };
                    if better {
                        best = Some((pi, hit));
                    }
                }
            }
            let (pi, hit) =
                best.ok_or_else(|| Error::Input(format!("no surface covers pixel ({x},{y})")))?;
            surface[y * w + x] = (pi as u16, hit.face);
            disparity.set(x, y, 0, hit.disparity as f32);
            for c in 0..3 {
                normals.set(x, y, c, hit.normal[c] as f32);
            }
            // Lambertian shading with an ambient floor.
            let ndotl = (hit.normal[0] * spec.light[0]
                + hit.normal[1] * spec.light[1]
                + hit.normal[2] * spec.light[2])
                .max(0.0);
            let shade = 0.35 + 0.65 * ndotl;
            for c in 0..3 {
                color.set(x, y, c, (hit.albedo[c] as f64 * shade) as f32);
            }
        }
    }

    // Soft shadow bands: color edges that are not depth edges.
    if color_model.shadow_edge_strength > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5aad_0e55);
        let bands = rng.random_range(1..=2);
        for _ in 0..bands {
            let px = rng.random_range(0.0..w as f64);
            let py = rng.random_range(0.0..h as f64);
            let ang = rng.random_range(0.0..std::f64::consts::PI);
            let (nx, ny) = (ang.cos(), ang.sin());
            let strength = color_model.shadow_edge_strength * rng.random_range(0.6..1.0);
            for y in 0..h {
                for x in 0..w {
                    let dist = (x as f64 - px) * nx + (y as f64 - py) * ny;
                    // Transition over ~4 px: sharp enough to register as a
                    // color edge.
                    let t = (dist / 2.0).clamp(-1.0, 1.0) * 0.5 + 0.5;
                    let fac = 1.0 - strength * t;
                    for c in 0..3 {
                        color.set(x, y, c, (color.get(x, y, c) as f64 * fac) as f32);
                    }
                }
            }
        }
    }

    // Contour mask: near side of occlusions. Crease mask: face boundaries
    // within a primitive, marked on the lower face id.
    let mut contour_mask = MultiChannelImage::new(w, h, 1);
    let mut crease_mask = MultiChannelImage::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (pi, face) = surface[y * w + x];
            let d = disparity.get(x, y, 0) as f64;
            let mut contour = false;
            let mut crease = false;
            for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (qx, qy) = (nx as usize, ny as usize);
                let (qpi, qface) = surface[qy * w + qx];
                let qd = disparity.get(qx, qy, 0) as f64;
                if qpi != pi && d - qd > CONTOUR_GAP {
                    contour = true;
                }
                if qpi == pi && qface != face && face < qface {
                    crease = true;
                }
            }
            if contour {
                contour_mask.set(x, y, 0, 1.0);
            }
            if crease {
                crease_mask.set(x, y, 0, 1.0);
            }
        }
    }

    Ok(RenderedScene {
        color,
        disparity,
        normals,
        contour_mask,
        crease_mask,
    })
}

/// Renders with the default color model.
pub fn render(spec: &SceneSpec) -> Result<RenderedScene> {
    render_with_color(spec, &CorruptionSpec::default().color)
}

/// Corrupted channel estimates.
pub struct CorruptedChannels {
    pub disparity: MultiChannelImage,
    pub normals: MultiChannelImage,
}

/// Produces unreliable disparity/normal estimates from the exact render.
pub fn corrupt(
    scene: &RenderedScene,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<CorruptedChannels> {
    spec.validate()?;
    let (w, h) = (scene.disparity.width(), scene.disparity.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Disparity: blur, disocclusion-band noise, quantization.
    let dc = &spec.disparity;
    let mut disp = if dc.blur_sigma > 0.0 {
        image::filter(
            &scene.disparity,
            &FilterSpec::Gaussian {
                sigma: dc.blur_sigma,
            },
        )?
    } else {
        scene.disparity.clone()
    };
    if dc.band_width > 0 && dc.band_noise_sigma > 0.0 {
        // Disocclusion noise is biased toward the occluder: matching drags
        // background pixels toward the foreground disparity with an extent
        // that varies along the contour, displacing the apparent edge.
        let band = disocclusion_band(&scene.disparity, dc.band_width);
        let r = dc.band_width as isize;
        let mut profile = MultiChannelImage::from_fn(w, h, 1, |_, _, _| {
            rng.random_range(0.0f32..1.0)
        });
        profile = image::filter(&profile, &FilterSpec::Gaussian { sigma: 4.0 })?;
        for y in 0..h {
            for x in 0..w {
                if !band[y * w + x] {
                    continue;
                }
                let mut near_max = scene.disparity.get(x, y, 0) as f64;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let v =
                            scene.disparity.get_clamped(x as isize + dx, y as isize + dy, 0);
                        near_max = near_max.max(v as f64);
                    }
                }
                let d = disp.get(x, y, 0) as f64;
                // Pull toward the nearby foreground, plus residual jitter.
                // Smoothing concentrates the profile near 0.5; stretch it
                // back to span weak-to-complete fattening.
                let pull = ((profile.get(x, y, 0) as f64 - 0.5) * 3.0 + 0.5).clamp(0.0, 1.0);
                let jitter = gaussian_sample(&mut rng) * dc.band_noise_sigma * 0.25;
                let v = (d + pull * (near_max - d) + jitter).max(0.05);
                disp.set(x, y, 0, v as f32);
            }
        }
    }
    if dc.quantization > 0.0 {
        let q = dc.quantization;
        disp.map_inplace(|v| ((v as f64 / q).round() * q) as f32);
    }

    // Normals: blur, texture leakage from the color channel, renormalize.
    let nc = &spec.normal;
    let normals = if nc.blur_sigma == 0.0 && nc.texture_leak == 0.0 {
        scene.normals.clone()
    } else {
        let mut n = if nc.blur_sigma > 0.0 {
            image::filter(
                &scene.normals,
                &FilterSpec::Gaussian {
                    sigma: nc.blur_sigma,
                },
            )?
        } else {
            scene.normals.clone()
        };
        if nc.texture_leak > 0.0 {
            let lum = luminance(&scene.color);
            let (gx, gy) = image::gradient(&lum, &FilterSpec::CentralDifference)?;
            for y in 0..h {
                for x in 0..w {
                    let a = nc.texture_leak;
                    let vx = n.get(x, y, 0) as f64 + a * gx.get(x, y, 0) as f64;
                    let vy = n.get(x, y, 1) as f64 + a * gy.get(x, y, 0) as f64;
                    n.set(x, y, 0, vx as f32);
                    n.set(x, y, 1, vy as f32);
                }
            }
        }
        renormalize_normals(&mut n);
        n
    };

    Ok(CorruptedChannels {
        disparity: disp,
        normals,
    })
}

/// Pixels on the far side of a contour: a much nearer surface lies within
/// `width` pixels.
fn disocclusion_band(disparity: &MultiChannelImage, width: usize) -> Vec<bool> {
    let (w, h) = (disparity.width(), disparity.height());
    let r = width as isize;
    let mut band = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = disparity.get(x, y, 0) as f64;
            let mut near_max = d;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = disparity.get_clamped(x as isize + dx, y as isize + dy, 0) as f64;
                    near_max = near_max.max(v);
                }
            }
            band[y * w + x] = near_max - d > CONTOUR_GAP;
        }
    }
    band
}

/// Box-Muller standard normal sample.
fn gaussian_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn luminance(color: &MultiChannelImage) -> MultiChannelImage {
    MultiChannelImage::from_fn(color.width(), color.height(), 1, |x, y, _| {
        0.299 * color.get(x, y, 0) + 0.587 * color.get(x, y, 1) + 0.114 * color.get(x, y, 2)
    })
}

fn renormalize_normals(n: &mut MultiChannelImage) {
    for y in 0..n.height() {
        for x in 0..n.width() {
            let nx = n.get(x, y, 0) as f64;
            let ny = n.get(x, y, 1) as f64;
            let nz = n.get(x, y, 2) as f64;
            let norm = (nx * nx + ny * ny + nz * nz).sqrt();
            if norm > 0.0 {
                n.set(x, y, 0, (nx / norm) as f32);
                n.set(x, y, 1, (ny / norm) as f32);
                n.set(x, y, 2, (nz / norm) as f32);
            }
        }
    }
}

/// Draws a randomized desk-scale scene: textured, gently sloped background
/// with 2-4 objects at well-separated disparity levels.
pub fn random_scene(seed: u64, width: usize, height: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f64, height as f64);

    let palette = [
        [0.85, 0.32, 0.28],
        [0.30, 0.62, 0.85],
        [0.40, 0.78, 0.38],
        [0.88, 0.74, 0.30],
        [0.66, 0.45, 0.82],
        [0.80, 0.80, 0.78],
        [0.35, 0.35, 0.40],
        [0.78, 0.55, 0.35],
    ];
    let pick_texture = |rng: &mut ChaCha8Rng| -> Texture {
        let a = palette[rng.random_range(0..palette.len())];
        let b = palette[rng.random_range(0..palette.len())];
        match rng.random_range(0..3) {
            0 => Texture {
                kind: TextureKind::Flat,
                albedo_a: a,
                albedo_b: a,
            },
            1 => Texture {
                kind: TextureKind::Checker {
                    cell: rng.random_range(6.0..16.0),
                },
                albedo_a: a,
                albedo_b: b,
            },
            _ => Texture {
                kind: TextureKind::Stripes {
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    period: rng.random_range(5.0..14.0),
                },
                albedo_a: a,
                albedo_b: b,
            },
        }
    };

    // Sloped surfaces make disparity quantization produce stair-step
    // artifacts across whole regions, like integer-disparity stereo output.
    let bg_slope = 0.05;
    let mut primitives = vec![Primitive::Background {
        disparity: rng.random_range(6.0..8.0),
        slope: (
            rng.random_range(-bg_slope..bg_slope),
            rng.random_range(-bg_slope..bg_slope),
        ),
        texture: pick_texture(&mut rng),
    }];

    // Objects sit on disparity levels separated by at least 3 units so every
    // occlusion produces a crisp analytic contour; the deepest background
    // corner reaches about 8 + 0.05 * w/2.
    let bg_ceiling = 8.0 + bg_slope * wf.max(hf) / 2.0;
    let background_texture = match &primitives[0] {
        Primitive::Background { texture, .. } => texture.clone(),
        _ => unreachable!(),
    };
    let n_objects = rng.random_range(2..=4);
    for k in 0..n_objects {
        let level = bg_ceiling + 3.5 + 5.0 * k as f64 + rng.random_range(0.0..1.5);
        let budget = level - bg_ceiling - 1.5;
        // Camouflaged objects reuse the background texture: their contours
        // carry no color evidence and must be found from the other channels.
        let texture = if rng.random_range(0.0..1.0) < 0.5 {
            background_texture.clone()
        } else {
            pick_texture(&mut rng)
        };
        let prim = match rng.random_range(0..3) {
            0 => Primitive::Sphere {
                center: (
                    rng.random_range(0.2 * wf..0.8 * wf),
                    rng.random_range(0.2 * hf..0.8 * hf),
                ),
                radius: rng.random_range(0.10 * wf..0.22 * wf),
                disparity: level,
                texture,
            },
            1 => {
                let w0 = rng.random_range(0.18 * wf..0.38 * wf);
                let h0 = rng.random_range(0.18 * hf..0.38 * hf);
                let u0 = rng.random_range(0.05 * wf..0.9 * wf - w0);
                let v0 = rng.random_range(0.15 * hf..0.9 * hf - h0);
                let side = rng.random_range(0.06 * wf..0.14 * wf);
                let top = rng.random_range(0.06 * hf..0.14 * hf);
                // Sloped faces keep a disparity margin above the deepest
                // background.
                let side_slope = rng.random_range(0.15..0.45_f64).min(budget / side);
                let top_slope = rng.random_range(0.15..0.45_f64).min(budget / top);
                Primitive::BoxPrism {
                    rect: [u0, v0, u0 + w0, v0 + h0],
                    disparity: level,
                    side: Some((side, side_slope)),
                    top: Some((top, top_slope)),
                    texture,
                }
            }
            _ => {
                let w0 = rng.random_range(0.2 * wf..0.4 * wf);
                let h0 = rng.random_range(0.2 * hf..0.4 * hf);
                let u0 = rng.random_range(0.05 * wf..0.9 * wf - w0);
                let v0 = rng.random_range(0.05 * hf..0.9 * hf - h0);
                let max_slope = (budget / (w0 + h0)).min(0.08);
                Primitive::Rect {
                    rect: [u0, v0, u0 + w0, v0 + h0],
                    disparity: level,
                    slope: (
                        rng.random_range(-max_slope..max_slope),
                        rng.random_range(-max_slope..max_slope),
                    ),
                    texture,
                }
            }
        };
        primitives.push(prim);
    }

    let mut light: [f64; 3] = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0];
    let ln = (light[0] * light[0] + light[1] * light[1] + light[2] * light[2]).sqrt();
    for c in &mut light {
        *c /= ln;
    }

    SceneSpec {
        width,
        height,
        primitives,
        light,
        seed,
    }
}

/// One scene folder inside a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub dir: PathBuf,
    pub seed: u64,
}

/// Directory-backed dataset of rendered, corrupted scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub scenes: Vec<SceneEntry>,
}

pub const SCENE_FILES: [&str; 7] = [
    "color.ppm",
    "disp_gt.pfm",
    "disp_est.pfm",
    "normals_gt.pfm",
    "normals_est.pfm",
    "edges_gt.pfm",
    "mask.pfm",
];

impl DatasetManifest {
    pub fn index_path(root: &Path) -> PathBuf {
        root.join("index.txt")
    }

    /// Parses `index.txt` under `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let index = Self::index_path(root);
        let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let mut scenes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (dir, seed) = match (parts.next(), parts.next()) {
                (Some(d), Some(s)) => (d, s),
                _ => {
                    return Err(Error::format(
                        &index,
                        format!("line {}: expected `<dir> <seed>`", lineno + 1),
                    ))
                }
            };
            let seed: u64 = seed.parse().map_err(|_| {
                Error::format(&index, format!("line {}: bad seed {seed:?}", lineno + 1))
            })?;
            scenes.push(SceneEntry {
                dir: root.join(dir),
                seed,
            });
        }
        if scenes.is_empty() {
            return Err(Error::format(&index, "dataset index lists no scenes"));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            scenes,
        })
    }
}

/// Distinct deterministic stream for corruption noise.
fn corruption_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

/// Generates and writes one complete scene folder.
pub fn generate_scene_files(
    dir: &Path,
    seed: u64,
    width: usize,
    height: usize,
    corruption: &CorruptionSpec,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = random_scene(seed, width, height);
    let scene = render_with_color(&spec, &corruption.color)?;
    let est = corrupt(&scene, corruption, corruption_seed(seed))?;

    let gt = ground_truth::make_ground_truth(
        &scene.disparity,
        NormalSource::Image(&scene.normals),
        &GroundTruthConfig::direct(),
    )?;
    let mask = net::make_mask(&scene.color, gt.edge.image(), &net::MaskConfig::default())?;

    io::write_ppm(&dir.join("color.ppm"), &scene.color)?;
    io::write_pfm(&dir.join("disp_gt.pfm"), &scene.disparity)?;
    io::write_pfm(&dir.join("disp_est.pfm"), &est.disparity)?;
    io::write_pfm(&dir.join("normals_gt.pfm"), &scene.normals)?;
    io::write_pfm(&dir.join("normals_est.pfm"), &est.normals)?;
    io::write_pfm(&dir.join("edges_gt.pfm"), gt.edge.image())?;
    io::write_pfm(&dir.join("mask.pfm"), &mask)?;
    Ok(())
}

/// Generates `n_scenes` scene folders under `root` plus the `index.txt`
/// listing. Deterministic for fixed seeds; `jobs > 1` parallelizes across
/// scenes without changing any file contents.
pub fn make_dataset(
    root: &Path,
    n_scenes: usize,
    width: usize,
    height: usize,
    base_seed: u64,
    corruption: &CorruptionSpec,
    jobs: usize,
) -> Result<DatasetManifest> {
    if n_scenes == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries: Vec<(String, u64)> = (0..n_scenes)
        .map(|i| (format!("scene_{i:04}"), base_seed.wrapping_add(i as u64)))
        .collect();

    let jobs = jobs.clamp(1, n_scenes);
    if jobs == 1 {
        for (name, seed) in &entries {
            generate_scene_files(&root.join(name), *seed, width, height, corruption)?;
        }
    } else {
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = entries
                .chunks(entries.len().div_ceil(jobs))
                .map(|chunk| {
                    scope.spawn(move || {
                        for (name, seed) in chunk {
                            generate_scene_files(
                                &root.join(name),
                                *seed,
                                width,
                                height,
                                corruption,
                            )?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|handle| handle.join().expect("scene worker panicked"))
                .collect()
        });
        for r in results {
            r?;
        }
    }

    let mut index = String::new();
    for (name, seed) in &entries {
        index.push_str(&format!("{name} {seed}\n"));
    }
    io::write_atomic(&DatasetManifest::index_path(root), index.as_bytes())?;

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        scenes: entries
            .into_iter()
            .map(|(name, seed)| SceneEntry {
                dir: root.join(name),
                seed,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_scene() -> SceneSpec {
        SceneSpec {
            width: 48,
            height: 48,
            primitives: vec![
                Primitive::Background {
                    disparity: 5.0,
                    slope: (0.0, 0.0),
                    texture: Texture::flat([0.5, 0.5, 0.5]),
                },
                Primitive::Rect {
                    rect: [14.0, 14.0, 33.0, 33.0],
                    disparity: 15.0,
                    slope: (0.0, 0.0),
                    texture: Texture::flat([0.8, 0.3, 0.3]),
                },
            ],
            light: [0.0, 0.0, 1.0],
            seed: 7,
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        let spec = SceneSpec {
            width: 8,
            height: 8,
            primitives: vec![],
            light: [0.0, 0.0, 1.0],
            seed: 0,
        };
        assert!(matches!(render(&spec), Err(Error::Input(_))));
    }

    #[test]
    fn square_over_background_has_outline_contour_no_crease() {
        let scene = render(&square_scene()).unwrap();
        assert!(scene.crease_mask.data().iter().all(|&v| v == 0.0));
        // Contour pixels are exactly the square's 1-px outline (near side).
        for y in 0..48usize {
            for x in 0..48usize {
                let inside = (14..=33).contains(&x) && (14..=33).contains(&y);
                let interior = (15..=32).contains(&x) && (15..=32).contains(&y);
                let expected = inside && !interior;
                assert_eq!(
                    scene.contour_mask.get(x, y, 0) == 1.0,
                    expected,
                    "at {x},{y}"
                );
            }
        }
        assert!(scene.disparity.get(14, 20, 0) > scene.disparity.get(13, 20, 0));
    }

    #[test]
    fn box_at_oblique_angle_has_crease_edges() {
        let spec = SceneSpec {
            width: 64,
            height: 64,
            primitives: vec![
                Primitive::Background {
                    disparity: 5.0,
                    slope: (0.0, 0.0),
                    texture: Texture::flat([0.4, 0.4, 0.45]),
                },
                Primitive::BoxPrism {
                    rect: [16.0, 24.0, 40.0, 48.0],
                    disparity: 16.0,
                    side: Some((10.0, 0.4)),
                    top: Some((8.0, 0.4)),
                    texture: Texture::flat([0.7, 0.6, 0.3]),
                },
            ],
            light: [0.2, -0.2, 0.96],
            seed: 3,
        };
        let scene = render(&spec).unwrap();
        let crease_count: usize = scene
            .crease_mask
            .data()
            .iter()
            .filter(|&&v| v == 1.0)
            .count();
        assert!(crease_count > 20, "crease pixels: {crease_count}");
        assert_eq!(scene.crease_mask.get(40, 36, 0), 1.0);
        assert_eq!(scene.crease_mask.get(28, 24, 0), 1.0);
        // Side face normal differs strongly from the front face normal.
        let front = [
            scene.normals.get(30, 36, 0),
            scene.normals.get(30, 36, 1),
            scene.normals.get(30, 36, 2),
        ];
        let side = [
            scene.normals.get(45, 36, 0),
            scene.normals.get(45, 36, 1),
            scene.normals.get(45, 36, 2),
        ];
        let dot: f32 = front.iter().zip(&side).map(|(a, b)| a * b).sum();
        assert!(dot < 0.9, "front/side normals too similar: dot {dot}");
    }

    #[test]
    fn render_is_deterministic_and_normals_unit() {
        let spec = random_scene(99, 64, 48);
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        assert_eq!(a.color.data(), b.color.data());
        assert_eq!(a.disparity.data(), b.disparity.data());
        assert_eq!(a.normals.data(), b.normals.data());
        assert!(a.normals.max_normal_deviation().unwrap() < 1e-3);
        for y in 0..48 {
            for x in 0..64 {
                assert!(a.normals.get(x, y, 2) > 0.0, "normal not camera-facing");
            }
        }
    }

    #[test]
    fn contour_pixels_occlude_a_deeper_surface() {
        for seed in [1u64, 2, 3] {
            let spec = random_scene(seed, 64, 64);
            let scene = render(&spec).unwrap();
            for y in 0..64usize {
                for x in 0..64usize {
                    if scene.contour_mask.get(x, y, 0) != 1.0 {
                        continue;
                    }
                    let d = scene.disparity.get(x, y, 0);
                    let mut occludes_deeper = false;
                    for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= 64 || ny >= 64 {
                            continue;
                        }
                        if d - scene.disparity.get(nx as usize, ny as usize, 0)
                            > CONTOUR_GAP as f32
                        {
                            occludes_deeper = true;
                        }
                    }
                    assert!(occludes_deeper, "contour at {x},{y} occludes nothing");
                }
            }
        }
    }

    #[test]
    fn zero_corruption_is_identity() {
        let scene = render(&square_scene()).unwrap();
        let est = corrupt(&scene, &CorruptionSpec::none(), 42).unwrap();
        assert_eq!(est.disparity.data(), scene.disparity.data());
        assert_eq!(est.normals.data(), scene.normals.data());
    }

    #[test]
    fn corruption_is_deterministic_given_seed() {
        let scene = render(&random_scene(5, 48, 48)).unwrap();
        let spec = CorruptionSpec::default();
        let a = corrupt(&scene, &spec, 10).unwrap();
        let b = corrupt(&scene, &spec, 10).unwrap();
        assert_eq!(a.disparity.data(), b.disparity.data());
        assert_eq!(a.normals.data(), b.normals.data());
        let c = corrupt(&scene, &spec, 11).unwrap();
        assert_ne!(a.disparity.data(), c.disparity.data());
    }

    #[test]
    fn band_noise_concentrates_near_contours() {
        let scene = render(&square_scene()).unwrap();
        let corruption = CorruptionSpec {
            disparity: DisparityCorruption {
                band_width: 6,
                band_noise_sigma: 2.0,
                blur_sigma: 0.0,
                quantization: 0.0,
            },
            normal: NormalCorruption {
                texture_leak: 0.0,
                blur_sigma: 0.0,
            },
            color: ColorModel {
                texture_contrast: 1.0,
                shadow_edge_strength: 0.0,
            },
        };
        let est = corrupt(&scene, &corruption, 77).unwrap();
        let band = disocclusion_band(&scene.disparity, 6);
        let (mut sq_band, mut n_band, mut sq_out, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
        for y in 0..48usize {
            for x in 0..48usize {
                let e = est.disparity.get(x, y, 0) as f64 - scene.disparity.get(x, y, 0) as f64;
                if band[y * 48 + x] {
                    sq_band += e * e;
                    n_band += 1;
                } else {
                    sq_out += e * e;
                    n_out += 1;
                }
            }
        }
        let rmse_band = (sq_band / n_band as f64).sqrt();
        let rmse_out = (sq_out / n_out.max(1) as f64).sqrt();
        assert!(
            rmse_band > 3.0 * rmse_out.max(1e-9),
            "band {rmse_band} vs elsewhere {rmse_out}"
        );
    }

    #[test]
    fn make_dataset_writes_complete_folders() {
        let root = std::env::temp_dir().join(format!("depth-edges-ds-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        let manifest = make_dataset(&root, 3, 32, 32, 1000, &CorruptionSpec::default(), 1).unwrap();
        assert_eq!(manifest.scenes.len(), 3);
        for entry in &manifest.scenes {
            for file in SCENE_FILES {
                assert!(entry.dir.join(file).is_file(), "missing {file}");
            }
        }
        let loaded = DatasetManifest::load(&root).unwrap();
        assert_eq!(loaded, manifest);

        // Regeneration with the same seeds is byte-identical.
        let before: Vec<Vec<u8>> = manifest
            .scenes
            .iter()
            .map(|e| std::fs::read(e.dir.join("disp_est.pfm")).unwrap())
            .collect();
        make_dataset(&root, 3, 32, 32, 1000, &CorruptionSpec::default(), 2).unwrap();
        for (entry, old) in manifest.scenes.iter().zip(&before) {
            let new = std::fs::read(entry.dir.join("disp_est.pfm")).unwrap();
            assert_eq!(&new, old);
        }
        let _ = std::fs::remove_dir_all(&root);
    }
}
