//! Flat `key = value` run configuration shared by all subcommands.
//!
//! Every knob of the pipeline lives here with the library defaults; absent
//! keys keep their default, unknown keys are rejected with the offending
//! line, and every parse error names the line and key at fault.

use std::path::Path;

use depth_edges::ground_truth::{GroundTruthConfig, LogisticParams};
use depth_edges::net::{ArchitectureConfig, HeadKind, TrainConfig};
use depth_edges::refine::RefineConfig;
use depth_edges::scene::CorruptionSpec;
use depth_edges::segment::{StrengthenConfig, StrengthenMode};
use depth_edges::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Network topology.
    pub encoder_layers: usize,
    pub widths: Option<Vec<usize>>,
    pub head: HeadKind,
    pub train: TrainConfig,
    pub corruption: CorruptionSpec,
    pub gt_alpha: f64,
    pub gt_beta: f64,
    pub gt_smoothed: bool,
    pub strengthen: bool,
    pub strengthen_cfg: StrengthenConfig,
    pub refine: RefineConfig,
    pub refine_levels: usize,
    pub c_window: f64,
    pub c_sigma: f64,
    pub direction_threshold: f32,
    pub slack_radius: usize,
    pub threshold_count: usize,
    pub overlay_threshold: f32,
    /// Shallow-minima suppression for the watershed (0 disables; useful for
    /// analytically exact edge maps).
    pub minima_depth: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder_layers: 5,
            widths: None,
            head: HeadKind::Edge,
            train: TrainConfig::desk(),
            corruption: CorruptionSpec::default(),
            gt_alpha: depth_edges::ground_truth::DEFAULT_ALPHA,
            gt_beta: depth_edges::ground_truth::DEFAULT_BETA,
            gt_smoothed: false,
            strengthen: true,
            strengthen_cfg: StrengthenConfig::default(),
            refine: RefineConfig::default(),
            refine_levels: 3,
            c_window: depth_edges::refine::DEFAULT_C_WINDOW,
            c_sigma: depth_edges::refine::DEFAULT_C_SIGMA,
            direction_threshold: 0.1,
            slack_radius: depth_edges::eval::DEFAULT_SLACK_RADIUS,
            threshold_count: depth_edges::eval::DEFAULT_THRESHOLDS,
            overlay_threshold: 0.05,
            minima_depth: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{lineno}: expected `key = value`", path.display()))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| {
                Error::Config(format!("{}:{lineno}: {e}", path.display()))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("invalid value {value:?} for key `{key}`"))
        }
        match key {
            "net.encoder_layers" => self.encoder_layers = parse(key, value)?,
            "net.widths" => {
                let widths: std::result::Result<Vec<usize>, String> = value
                    .split(',')
                    .map(|tok| parse(key, tok.trim()))
                    .collect();
                self.widths = Some(widths?);
            }
            "net.head" => {
                self.head = match value {
                    "edge" => HeadKind::Edge,
                    "contour-direction" => HeadKind::ContourDirection,
                    other => return Err(format!("unknown head {other:?}")),
                }
            }
            "train.patch_size" => self.train.patch_size = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.adam_epsilon" => self.train.adam_epsilon = parse(key, value)?,
            "train.l2_lambda" => self.train.l2_lambda = parse(key, value)?,
            "train.mask_weight" => self.train.mask_weight = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.val_fraction" => self.train.val_fraction = parse(key, value)?,
            "corrupt.band_width" => self.corruption.disparity.band_width = parse(key, value)?,
            "corrupt.band_noise_sigma" => {
                self.corruption.disparity.band_noise_sigma = parse(key, value)?
            }
            "corrupt.blur_sigma" => self.corruption.disparity.blur_sigma = parse(key, value)?,
            "corrupt.quantization" => self.corruption.disparity.quantization = parse(key, value)?,
            "corrupt.normal_leak" => self.corruption.normal.texture_leak = parse(key, value)?,
            "corrupt.normal_blur" => self.corruption.normal.blur_sigma = parse(key, value)?,
            "corrupt.texture_contrast" => {
                self.corruption.color.texture_contrast = parse(key, value)?
            }
            "corrupt.shadow_strength" => {
                self.corruption.color.shadow_edge_strength = parse(key, value)?
            }
            "gt.alpha" => self.gt_alpha = parse(key, value)?,
            "gt.beta" => self.gt_beta = parse(key, value)?,
            "gt.recipe" => {
                self.gt_smoothed = match value {
                    "direct" => false,
                    "smoothed" => true,
                    other => return Err(format!("unknown recipe {other:?}")),
                }
            }
            "segment.strengthen" => self.strengthen = parse(key, value)?,
            "segment.strengthen_mode" => {
                self.strengthen_cfg.mode = match value {
                    "factor" => StrengthenMode::Factor,
                    "direct" => StrengthenMode::Direct,
                    other => return Err(format!("unknown strengthen mode {other:?}")),
                }
            }
            "segment.length_saturation" => {
                self.strengthen_cfg.length_saturation = parse(key, value)?
            }
            "segment.length_sharpness" => {
                self.strengthen_cfg.length_sharpness = parse(key, value)?
            }
            "segment.connection_radius" => {
                self.strengthen_cfg.connection_radius = parse(key, value)?
            }
            "refine.mu" => self.refine.mu = parse(key, value)?,
            "refine.edge_cutoff" => self.refine.edge_cutoff = parse(key, value)?,
            "refine.max_gauss_newton" => self.refine.max_gauss_newton = parse(key, value)?,
            "refine.cg_tolerance" => self.refine.cg_tolerance = parse(key, value)?,
            "refine.levels" => self.refine_levels = parse(key, value)?,
            "refine.c_window" => self.c_window = parse(key, value)?,
            "refine.c_sigma" => self.c_sigma = parse(key, value)?,
            "refine.direction_threshold" => self.direction_threshold = parse(key, value)?,
            "eval.slack_radius" => self.slack_radius = parse(key, value)?,
            "eval.thresholds" => self.threshold_count = parse(key, value)?,
            "segment.overlay_threshold" => self.overlay_threshold = parse(key, value)?,
            "segment.minima_depth" => self.minima_depth = parse(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if let Some(widths) = &self.widths {
            if widths.len() != self.encoder_layers {
                return Err(Error::Config(format!(
                    "net.widths lists {} entries but net.encoder_layers is {}",
                    widths.len(),
                    self.encoder_layers
                )));
            }
        }
        if self.gt_alpha <= 0.0 || self.gt_beta <= 0.0 {
            return Err(Error::Config("gt.alpha and gt.beta must be positive".into()));
        }
        self.train.validate()?;
        self.corruption.validate()?;
        Ok(())
    }

    pub fn architecture(&self) -> ArchitectureConfig {
        let mut arch = ArchitectureConfig::desk(self.encoder_layers, self.head);
        if let Some(widths) = &self.widths {
            arch.encoder_widths = widths.clone();
        }
        arch
    }

    pub fn ground_truth(&self) -> Result<GroundTruthConfig> {
        let mut cfg = if self.gt_smoothed {
            GroundTruthConfig::smoothed()
        } else {
            GroundTruthConfig::direct()
        };
        cfg.contour.alpha = LogisticParams::new(self.gt_alpha)?;
        cfg.crease.beta = LogisticParams::new(self.gt_beta)?;
        Ok(cfg)
    }

    pub fn corruption(&self) -> &CorruptionSpec {
        &self.corruption
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("depth-edges-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("cfg-{}.txt", contents.len()));
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn defaults_and_overrides() {
        let path = write_tmp("# comment\ntrain.epochs = 7\nnet.head = contour-direction\n");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.head, HeadKind::ContourDirection);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.train.batch_size, 5);
        assert_eq!(cfg.train.mask_weight, 10.0);
        assert_eq!(cfg.refine.mu, 0.05);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let path = write_tmp("train.epochs = 3\nbogus.key = 1\n");
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("bogus.key"), "{err}");
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let path = write_tmp("train.epochs = many\n");
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        assert!(err.contains("train.epochs"), "{err}");
    }

    #[test]
    fn widths_must_match_layer_count() {
        let path = write_tmp("net.encoder_layers = 3\nnet.widths = 8,16\n");
        assert!(RunConfig::load(&path).is_err());
        let path = write_tmp("net.encoder_layers = 2\nnet.widths = 8,16\n");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.architecture().encoder_widths, vec![8, 16]);
    }
}
