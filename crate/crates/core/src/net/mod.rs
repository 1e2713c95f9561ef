//! Convolutional encoder–decoder for multi-channel depth-edge fusion.
//!
//! The network consumes a 7-channel input (RGB color, estimated disparity,
//! estimated normals) and emits either a 1-channel edge probability head or a
//! 3-channel contour+direction head. Encoder layers are 4x4 convolutions with
//! stride 2; decoder layers are nearest-neighbor 2x upsampling followed by a
//! 4x4 convolution. Skip connections concatenate pre-activation encoder
//! outputs onto pre-activation decoder outputs at equal resolution. Leaky
//! ReLU (slope 0.2) everywhere except the head, which uses sigmoid (and tanh
//! for direction channels). Batch normalization is per-layer configurable and
//! disabled near the bottleneck by default.
//!
//! Forward and backward passes are implemented by hand in f64; the model file
//! stores tensors as little-endian f32.

pub mod gradcheck;
mod layers;
mod train;

pub use layers::{conv2d, forward_batch, update_running_stats, ForwardCache, Mode, Tensor};
pub use train::{
    adam_step, assemble_input, backward_batch, infer, load_scene_tensors, loss, loss_gradient,
    loss_log_csv, make_contour_direction_target, make_mask, normalized_directions,
    param_squared_norm, sample_patch, train, AdamState, EpochLoss, Gradients, LayerGrads,
    MaskConfig, SceneTensors, TrainConfig, DISPARITY_INPUT_SCALE,
};

use std::io::Read as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Output head of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Single-channel depth-edge probability, sigmoid activation.
    Edge,
    /// Contour probability (sigmoid) plus two disparity-gradient direction
    /// components (tanh).
    ContourDirection,
}

impl HeadKind {
    pub fn channels(&self) -> usize {
        match self {
            HeadKind::Edge => 1,
            HeadKind::ContourDirection => 3,
        }
    }
}

/// Network topology. Decoder widths mirror the encoder; the decoder
/// convolution after each skip concatenation reduces the channel count back
/// to the mirrored schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureConfig {
    pub input_channels: usize,
    /// Feature map count per encoder layer.
    pub encoder_widths: Vec<usize>,
    /// Square kernel side.
    pub kernel: usize,
    /// Down/upsampling factor per layer.
    pub factor: usize,
    pub leaky_slope: f64,
    pub head: HeadKind,
    /// Per-layer batch-norm switch, encoder layers then decoder layers.
    pub batch_norm: Vec<bool>,
}

impl ArchitectureConfig {
    /// Doubling width schedule `16, 32, 64, ...` capped at 256, with batch
    /// norm disabled on the last two encoder layers, the first two decoder
    /// layers, and the head.
    pub fn desk(n_enc: usize, head: HeadKind) -> Self {
        let widths: Vec<usize> = (0..n_enc).map(|i| (16usize << i).min(256)).collect();
        let mut bn = vec![true; 2 * n_enc];
        for i in n_enc.saturating_sub(2)..n_enc + 2.min(n_enc) {
            bn[i] = false;
        }
        bn[2 * n_enc - 1] = false;
        ArchitectureConfig {
            input_channels: 7,
            encoder_widths: widths,
            kernel: 4,
            factor: 2,
            leaky_slope: 0.2,
            head,
            batch_norm: bn,
        }
    }

    pub fn n_enc(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Spatial granule: input width/height must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        self.factor.pow(self.n_enc() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_enc();
        if n == 0 {
            return Err(Error::Config("network needs at least one encoder layer".into()));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        if self.kernel != 4 || self.factor != 2 {
            return Err(Error::Config(
                "this architecture is fixed to 4x4 kernels with factor-2 resampling".into(),
            ));
        }
        if self.batch_norm.len() != 2 * n {
            return Err(Error::Config(format!(
                "batch-norm mask must have {} entries, got {}",
                2 * n,
                self.batch_norm.len()
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input channel count must be >= 1".into()));
        }
        Ok(())
    }

    /// `(c_in, c_out)` of every convolution, encoder layers then decoder
    /// layers.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let n = self.n_enc();
        let w = &self.encoder_widths;
        let mut shapes = Vec::with_capacity(2 * n);
        for i in 0..n {
            let c_in = if i == 0 { self.input_channels } else { w[i - 1] };
            shapes.push((c_in, w[i]));
        }
        for j in 0..n {
            let c_in = if j == 0 {
                w[n - 1]
            } else {
                // Previous decoder output plus its skip concatenation.
                let prev_out = self.decoder_width(j - 1);
                let skip = w[n - 1 - j];
                prev_out + skip
            };
            shapes.push((c_in, self.decoder_width(j)));
        }
        shapes
    }

    /// Output channel count of decoder layer `j` (mirrored schedule, head
    /// channels on the last layer).
    pub fn decoder_width(&self, j: usize) -> usize {
        let n = self.n_enc();
        if j + 1 == n {
            self.head.channels()
        } else {
            self.encoder_widths[n - 2 - j]
        }
    }

    /// Encoder layer whose pre-activation output is concatenated onto decoder
    /// layer `j`, if any.
    pub fn skip_source(&self, j: usize) -> Option<usize> {
        let n = self.n_enc();
        (j + 1 < n).then(|| n - 2 - j)
    }
}

/// Batch-norm trainable parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// One convolution layer: kernels `[c_out][c_in][k][k]`, biases `[c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNormState>,
}

impl ConvLayer {
    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize, k: usize) -> usize {
        ((o * self.c_in + i) * k + ky) * k + kx
    }
}

/// All trainable state plus the architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters {
    pub config: ArchitectureConfig,
    /// Encoder layers then decoder layers.
    pub layers: Vec<ConvLayer>,
}

impl NetworkParameters {
    /// He-style uniform fan-in initialization (leaky ReLU gain), biases zero.
    pub fn init(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        let k = config.kernel;
        let layers = config
            .layer_shapes()
            .iter()
            .enumerate()
            .map(|(li, &(c_in, c_out))| {
                let fan_in = (c_in * k * k) as f64;
                let bound = gain * (3.0 / fan_in).sqrt();
                let weights = (0..c_out * c_in * k * k)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                ConvLayer {
                    c_in,
                    c_out,
                    weights,
                    bias: vec![0.0; c_out],
                    bn: config.batch_norm[li].then(|| BatchNormState::new(c_out)),
                }
            })
            .collect();
        Ok(NetworkParameters {
            config: config.clone(),
            layers,
        })
    }

    /// Checks that every value is finite; names the first offending layer.
    pub fn check_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite())
                || layer.bn.as_ref().is_some_and(|bn| {
                    bn.gamma
                        .iter()
                        .chain(&bn.beta)
                        .chain(&bn.running_mean)
                        .chain(&bn.running_var)
                        .any(|v| !v.is_finite())
                });
            if bad {
                return Err(Error::Numeric(format!(
                    "non-finite parameter in layer {i}"
                )));
            }
        }
        Ok(())
    }
}

const MODEL_MAGIC: &[u8; 4] = b"DCUT";
const MODEL_VERSION: u32 = 1;

/// Serializes the model: magic, version, architecture descriptor, then per
/// layer the kernel/bias (and batch-norm) tensors as little-endian f32 in
/// declaration order.
pub fn save_model(path: &Path, params: &NetworkParameters) -> Result<()> {
    let cfg = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(match cfg.head {
        HeadKind::Edge => 0,
        HeadKind::ContourDirection => 1,
    });
    out.extend_from_slice(&(cfg.n_enc() as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.kernel as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.factor as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.input_channels as u32).to_le_bytes());
    out.extend_from_slice(&cfg.leaky_slope.to_le_bytes());
    for &w in &cfg.encoder_widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for &b in &cfg.batch_norm {
        out.push(b as u8);
    }
    for layer in &params.layers {
        let mut push = |values: &[f64]| {
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        push(&layer.weights);
        push(&layer.bias);
        if let Some(bn) = &layer.bn {
            push(&bn.gamma);
            push(&bn.beta);
            push(&bn.running_mean);
            push(&bn.running_var);
        }
    }
    crate::io::write_atomic(path, &out)
}

/// Loads a model file, validating magic, version and tensor sizes.
pub fn load_model(path: &Path) -> Result<NetworkParameters> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(path, "bad magic, not a model file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn std::io::Read| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
    let head = match byte[0] {
        0 => HeadKind::Edge,
        1 => HeadKind::ContourDirection,
        other => return Err(Error::format(path, format!("unknown head {other}"))),
    };
    let n_enc = read_u32(&mut r)? as usize;
    if n_enc == 0 || n_enc > 16 {
        return Err(Error::format(path, format!("implausible layer count {n_enc}")));
    }
    let kernel = read_u32(&mut r)? as usize;
    let factor = read_u32(&mut r)? as usize;
    let input_channels = read_u32(&mut r)? as usize;
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf).map_err(|e| Error::io(path, e))?;
    let leaky_slope = f64::from_le_bytes(f64buf);
    let mut encoder_widths = Vec::with_capacity(n_enc);
    for _ in 0..n_enc {
        encoder_widths.push(read_u32(&mut r)? as usize);
    }
    let mut batch_norm = Vec::with_capacity(2 * n_enc);
    for _ in 0..2 * n_enc {
        let mut b = [0u8; 1];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        batch_norm.push(b[0] != 0);
    }
    let config = ArchitectureConfig {
        input_channels,
        encoder_widths,
        kernel,
        factor,
        leaky_slope,
        head,
        batch_norm,
    };
    config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::format(path, msg),
        other => other,
    })?;

    let mut layers = Vec::new();
    for (li, (c_in, c_out)) in config.layer_shapes().into_iter().enumerate() {
        let mut read_f32s = |n: usize| -> Result<Vec<f64>> {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        };
        let weights = read_f32s(c_out * c_in * kernel * kernel)?;
        let bias = read_f32s(c_out)?;
        let bn = if config.batch_norm[li] {
            Some(BatchNormState {
                gamma: read_f32s(c_out)?,
                beta: read_f32s(c_out)?,
                running_mean: read_f32s(c_out)?,
                running_var: read_f32s(c_out)?,
            })
        } else {
            None
        };
        layers.push(ConvLayer {
            c_in,
            c_out,
            weights,
            bias,
            bn,
        });
    }
    // Trailing bytes indicate a config/file mismatch.
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after final tensor"));
    }
    Ok(NetworkParameters { config, layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_shapes() {
        let cfg = ArchitectureConfig::desk(5, HeadKind::Edge);
        assert_eq!(cfg.encoder_widths, vec![16, 32, 64, 128, 256]);
        assert_eq!(cfg.spatial_multiple(), 32);
        assert_eq!(
            cfg.batch_norm,
            vec![true, true, true, false, false, false, false, true, true, false]
        );
        let shapes = cfg.layer_shapes();
        assert_eq!(
            shapes,
            vec![
                (7, 16),
                (16, 32),
                (32, 64),
                (64, 128),
                (128, 256),
                (256, 128),
                (256, 64),
                (128, 32),
                (64, 16),
                (32, 1),
            ]
        );
        assert_eq!(cfg.skip_source(0), Some(3));
        assert_eq!(cfg.skip_source(3), Some(0));
        assert_eq!(cfg.skip_source(4), None);
    }

    #[test]
    fn model_round_trip() {
        let cfg = ArchitectureConfig::desk(2, HeadKind::ContourDirection);
        let params = NetworkParameters::init(&cfg, 42).unwrap();
        let dir = std::env::temp_dir().join(format!("depth-edges-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        save_model(&path, &params).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        for (a, b) in loaded.layers.iter().zip(&params.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                // f32 round trip.
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // Double round trip is exact.
        save_model(&path, &loaded).unwrap();
        let again = load_model(&path).unwrap();
        assert_eq!(again, loaded);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("depth-edges-badmodel-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_model(&path).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
