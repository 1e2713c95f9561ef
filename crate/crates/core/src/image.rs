//! Dense multi-channel float rasters and discrete differential operators.
//!
//! Storage is planar: channel `c` occupies one contiguous row-major plane, so
//! `data[c * w * h + y * w + x]` addresses sample `(x, y, c)`. Samples are
//! `f32`; every reduction (sums, means, dot products) accumulates in `f64`.
//!
//! All stencil operators handle image borders by edge replication, which keeps
//! derivatives of constant regions exactly zero up to the border.

use crate::error::{Error, Result};

/// Dense `width x height x channels` float raster.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl MultiChannelImage {
    /// Zero-filled image.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width >= 1 && height >= 1 && channels >= 1);
        MultiChannelImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Wraps an existing planar sample buffer.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be >= 1, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(MultiChannelImage {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut img = MultiChannelImage::new(width, height, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(x, y, c);
                    img.set(x, y, c, v);
                }
            }
        }
        img
    }

    /// Constant-valued image.
    pub fn splat(width: usize, height: usize, channels: usize, value: f32) -> Self {
        let mut img = MultiChannelImage::new(width, height, channels);
        img.data.fill(value);
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    /// Sample with edge-replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Contiguous plane of channel `c`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies channel `c` out as a single-channel image.
    pub fn extract_channel(&self, c: usize) -> MultiChannelImage {
        MultiChannelImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.channel(c).to_vec(),
        }
    }

    /// Stacks the channels of `parts` into one image. All parts must share
    /// spatial dimensions.
    pub fn concat_channels(parts: &[&MultiChannelImage]) -> Result<MultiChannelImage> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero images".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.width != w || p.height != h {
                return Err(Error::Shape(format!(
                    "concat size mismatch: {w}x{h} vs {}x{}",
                    p.width, p.height
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(MultiChannelImage {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    /// Applies `f` to every sample in place.
    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// New image with `f` applied to every sample.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> MultiChannelImage {
        let mut out = self.clone();
        out.map_inplace(f);
        out
    }

    /// Mean of all samples, accumulated in f64.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// True when every sample lies in `[0, 1]`.
    pub fn is_probability_map(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Checks the unit-norm invariant of a 3-channel normal image at every
    /// pixel where the norm is nonzero; returns the worst deviation from 1.
    pub fn max_normal_deviation(&self) -> Result<f64> {
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "normal image must have 3 channels, got {}",
                self.channels
            )));
        }
        let mut worst = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let nx = self.get(x, y, 0) as f64;
                let ny = self.get(x, y, 1) as f64;
                let nz = self.get(x, y, 2) as f64;
                let n = (nx * nx + ny * ny + nz * nz).sqrt();
                if n > 0.0 {
                    worst = worst.max((n - 1.0).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Bilinear sample of channel `c` at a continuous position, with edge
    /// replication outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let xi = x0 as isize;
        let yi = y0 as isize;
        let v00 = self.get_clamped(xi, yi, c) as f64;
        let v10 = self.get_clamped(xi + 1, yi, c) as f64;
        let v01 = self.get_clamped(xi, yi + 1, c) as f64;
        let v11 = self.get_clamped(xi + 1, yi + 1, c) as f64;
        v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
    }

    fn require_single_channel(&self, op: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "{op} expects a single-channel image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Discrete filter selection.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSpec {
    /// Two-point central difference, `(f(x+1) - f(x-1)) / 2`.
    CentralDifference,
    /// Derivative of a sampled Gaussian; exact on linear ramps after moment
    /// normalization.
    DerivativeOfGaussian { sigma: f64 },
    /// `gaussian(sigma_narrow) - gaussian(sigma_wide)` band-pass.
    DifferenceOfGaussians { sigma_narrow: f64, sigma_wide: f64 },
    Gaussian { sigma: f64 },
    /// 5-point Laplacian stencil.
    Laplacian5,
    /// Square median window of side `2 * radius + 1`.
    Median { radius: usize },
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            FilterSpec::CentralDifference | FilterSpec::Laplacian5 => true,
            FilterSpec::DerivativeOfGaussian { sigma } | FilterSpec::Gaussian { sigma } => {
                *sigma > 0.0
            }
            FilterSpec::DifferenceOfGaussians {
                sigma_narrow,
                sigma_wide,
            } => *sigma_narrow > 0.0 && *sigma_wide > 0.0,
            FilterSpec::Median { radius } => *radius >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid filter spec {self:?}")))
        }
    }
}

/// Sampled Gaussian, normalized to unit sum. Radius is `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Sampled Gaussian derivative with the first moment normalized to one, so
/// correlating a linear ramp recovers its slope exactly.
fn gaussian_derivative_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| t as f64 * (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let moment: f64 = k
        .iter()
        .zip(-radius..=radius)
        .map(|(v, t)| v * t as f64)
        .sum();
    for v in &mut k {
        *v /= moment;
    }
    k
}

/// Correlates one channel with a horizontal 1-D kernel (edge replication).
fn correlate_rows(img: &MultiChannelImage, kernel: &[f64]) -> MultiChannelImage {
    let radius = (kernel.len() / 2) as isize;
    let mut out = MultiChannelImage::new(img.width, img.height, img.channels);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0f64;
                for (i, &k) in kernel.iter().enumerate() {
                    let t = i as isize - radius;
                    acc += k * img.get_clamped(x as isize + t, y as isize, c) as f64;
                }
                out.set(x, y, c, acc as f32);
            }
        }
    }
    out
}

/// Correlates one channel with a vertical 1-D kernel (edge replication).
fn correlate_cols(img: &MultiChannelImage, kernel: &[f64]) -> MultiChannelImage {
    let radius = (kernel.len() / 2) as isize;
    let mut out = MultiChannelImage::new(img.width, img.height, img.channels);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                let mut acc = 0.0f64;
                for (i, &k) in kernel.iter().enumerate() {
                    let t = i as isize - radius;
                    acc += k * img.get_clamped(x as isize, y as isize + t, c) as f64;
                }
                out.set(x, y, c, acc as f32);
            }
        }
    }
    out
}

/// Horizontal and vertical derivatives of a single-channel image.
///
/// `spec` selects the discretization: central differences or a separable
/// derivative-of-Gaussian (derivative along the gradient axis, smoothing along
/// the other).
pub fn gradient(
    img: &MultiChannelImage,
    spec: &FilterSpec,
) -> Result<(MultiChannelImage, MultiChannelImage)> {
    img.require_single_channel("gradient")?;
    spec.validate()?;
    match spec {
        FilterSpec::CentralDifference => {
            let mut gx = MultiChannelImage::new(img.width, img.height, 1);
            let mut gy = MultiChannelImage::new(img.width, img.height, 1);
            for y in 0..img.height {
                for x in 0..img.width {
                    let xi = x as isize;
                    let yi = y as isize;
                    let dx =
                        (img.get_clamped(xi + 1, yi, 0) - img.get_clamped(xi - 1, yi, 0)) * 0.5;
                    let dy =
                        (img.get_clamped(xi, yi + 1, 0) - img.get_clamped(xi, yi - 1, 0)) * 0.5;
                    gx.set(x, y, 0, dx);
                    gy.set(x, y, 0, dy);
                }
            }
            Ok((gx, gy))
        }
        FilterSpec::DerivativeOfGaussian { sigma } => {
            let deriv = gaussian_derivative_kernel(*sigma);
            let smooth = gaussian_kernel(*sigma);
            let gx = correlate_cols(&correlate_rows(img, &deriv), &smooth);
            let gy = correlate_rows(&correlate_cols(img, &deriv), &smooth);
            Ok((gx, gy))
        }
        other => Err(Error::Config(format!(
            "gradient does not accept filter {other:?}"
        ))),
    }
}

/// Per-pixel Euclidean norm of the gradient.
pub fn gradient_magnitude(img: &MultiChannelImage, spec: &FilterSpec) -> Result<MultiChannelImage> {
    let (gx, gy) = gradient(img, spec)?;
    let mut out = MultiChannelImage::new(img.width, img.height, 1);
    for i in 0..out.data.len() {
        let x = gx.data[i] as f64;
        let y = gy.data[i] as f64;
        out.data[i] = (x * x + y * y).sqrt() as f32;
    }
    Ok(out)
}

/// 5-point Laplacian with edge replication; exact on quadratics in the
/// interior.
pub fn laplacian(img: &MultiChannelImage) -> Result<MultiChannelImage> {
    img.require_single_channel("laplacian")?;
    let mut out = MultiChannelImage::new(img.width, img.height, 1);
    for y in 0..img.height {
        for x in 0..img.width {
            let xi = x as isize;
            let yi = y as isize;
            let v = img.get_clamped(xi + 1, yi, 0) as f64
                + img.get_clamped(xi - 1, yi, 0) as f64
                + img.get_clamped(xi, yi + 1, 0) as f64
                + img.get_clamped(xi, yi - 1, 0) as f64
                - 4.0 * img.get(x, y, 0) as f64;
            out.set(x, y, 0, v as f32);
        }
    }
    Ok(out)
}

/// Smoothing/band-pass/median filtering. Median is applied per channel
/// independently; Gaussians are separable correlations.
pub fn filter(img: &MultiChannelImage, spec: &FilterSpec) -> Result<MultiChannelImage> {
    spec.validate()?;
    match spec {
        FilterSpec::Gaussian { sigma } => {
            let k = gaussian_kernel(*sigma);
            Ok(correlate_cols(&correlate_rows(img, &k), &k))
        }
        FilterSpec::DifferenceOfGaussians {
            sigma_narrow,
            sigma_wide,
        } => {
            let narrow = filter(
                img,
                &FilterSpec::Gaussian {
                    sigma: *sigma_narrow,
                },
            )?;
            let wide = filter(img, &FilterSpec::Gaussian { sigma: *sigma_wide })?;
            let mut out = narrow;
            for (o, w) in out.data.iter_mut().zip(wide.data.iter()) {
                *o -= *w;
            }
            Ok(out)
        }
        FilterSpec::Median { radius } => Ok(median_filter(img, *radius)),
        FilterSpec::Laplacian5 => {
            if img.channels == 1 {
                laplacian(img)
            } else {
                let planes: Vec<MultiChannelImage> = (0..img.channels)
                    .map(|c| laplacian(&img.extract_channel(c)))
                    .collect::<Result<_>>()?;
                let refs: Vec<&MultiChannelImage> = planes.iter().collect();
                MultiChannelImage::concat_channels(&refs)
            }
        }
        other => Err(Error::Config(format!(
            "filter does not accept gradient spec {other:?}"
        ))),
    }
}

fn median_filter(img: &MultiChannelImage, radius: usize) -> MultiChannelImage {
    let r = radius as isize;
    let mut out = MultiChannelImage::new(img.width, img.height, img.channels);
    let mut window = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        window.push(img.get_clamped(x as isize + dx, y as isize + dy, c));
                    }
                }
                window.sort_by(|a, b| a.total_cmp(b));
                out.set(x, y, c, window[window.len() / 2]);
            }
        }
    }
    out
}

/// Resampling direction for [`resample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleDirection {
    Down,
    Up,
}

/// Factor-2 resampling: `Down` keeps every second sample (stride semantics),
/// `Up` replicates each pixel into a 2x2 block (nearest neighbor).
pub fn resample(
    img: &MultiChannelImage,
    direction: ResampleDirection,
) -> Result<MultiChannelImage> {
    match direction {
        ResampleDirection::Down => {
            if img.width < 2 || img.height < 2 {
                return Err(Error::Shape(format!(
                    "cannot downsample a {}x{} image",
                    img.width, img.height
                )));
            }
            let w = img.width.div_ceil(2);
            let h = img.height.div_ceil(2);
            Ok(MultiChannelImage::from_fn(w, h, img.channels, |x, y, c| {
                img.get(2 * x, 2 * y, c)
            }))
        }
        ResampleDirection::Up => {
            let w = img.width * 2;
            let h = img.height * 2;
            Ok(MultiChannelImage::from_fn(w, h, img.channels, |x, y, c| {
                img.get(x / 2, y / 2, c)
            }))
        }
    }
}

/// Downscales to `target_width` with bilinear sampling, preserving aspect
/// ratio (height rounded to nearest). Images at or below the target width are
/// returned unchanged.
pub fn resize_to_width(img: &MultiChannelImage, target_width: usize) -> MultiChannelImage {
    if target_width >= img.width || target_width == 0 {
        return img.clone();
    }
    let scale = img.width as f64 / target_width as f64;
    let target_height = ((img.height as f64 / scale).round() as usize).max(1);
    MultiChannelImage::from_fn(target_width, target_height, img.channels, |x, y, c| {
        // Sample at the source-space center of the destination pixel.
        let sx = (x as f64 + 0.5) * scale - 0.5;
        let sy = (y as f64 + 0.5) * (img.height as f64 / target_height as f64) - 0.5;
        img.sample_bilinear(sx, sy, c) as f32
    })
}
