//! Run configuration: a TOML document mirroring the model configuration
//! plus paths. Every field has a default; unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model and training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    /// Feature width C.
    pub embed_dim: usize,
    /// Discretization level count M.
    pub levels: usize,
    /// Perspective channel width C'.
    pub perspective_channels: usize,
    /// Perspective space size K.
    pub codebook_size: usize,
    pub heads: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    /// Fraction of training before the transformed path activates.
    pub warmup_fraction: f64,
    /// Weight of the reconstruction loss in the total.
    pub lambda_rec: f64,
    /// EMA weight of the perspective space.
    pub ema_alpha: f64,
    /// Spire support width multiplier (1 = strict partition).
    pub support_factor: f64,
    /// Responsibility cutoff for the homography mixture.
    pub r_min: f64,
    /// Slab resolution of the reconstruction grid.
    pub recon_grid: usize,
    pub pia_layers: usize,
    pub resample_perspective: bool,
    pub pointness_window: usize,
    pub pointness_kappa: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip per step; 0 disables clipping.
    pub grad_clip: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub warp_train: f64,
    pub warp_test: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_size: 48,
            patch_size: 4,
            embed_dim: 32,
            levels: 4,
            perspective_channels: 32,
            codebook_size: 16,
            heads: 4,
            num_blocks: 4,
            num_classes: 4,
            warmup_fraction: 0.3,
            lambda_rec: 0.4,
            ema_alpha: 0.9,
            support_factor: 1.0,
            r_min: 0.01,
            recon_grid: 4,
            pia_layers: 1,
            resample_perspective: false,
            pointness_window: 5,
            pointness_kappa: 0.05,
            seed: 0,
            epochs: 10,
            batch_size: 12,
            learning_rate: 0.02,
            momentum: 0.9,
            grad_clip: 5.0,
            n_train: 600,
            n_test: 150,
            warp_train: 0.1,
            warp_test: 0.4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.img_size == 0 || self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} must be a positive multiple of the patch size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.embed_dim % 2 != 0 {
            return fail(format!("embed_dim must be even, got {}", self.embed_dim));
        }
        if self.levels < 2 {
            return fail(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.heads == 0 || self.perspective_channels % self.heads != 0 {
            return fail(format!(
                "perspective_channels {} must be divisible by heads {}",
                self.perspective_channels, self.heads
            ));
        }
        if self.num_classes < 2 || self.num_classes > 250 {
            return fail(format!("num_classes must lie in [2, 250], got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            ));
        }
        if self.lambda_rec < 0.0 {
            return fail(format!("lambda_rec must be >= 0, got {}", self.lambda_rec));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return fail(format!("ema_alpha must lie in (0, 1), got {}", self.ema_alpha));
        }
        if self.support_factor < 1.0 {
            return fail(format!(
                "support_factor must be >= 1, got {}",
                self.support_factor
            ));
        }
        if !(self.r_min > 0.0) || self.r_min >= 1.0 / self.codebook_size as f64 {
            return fail(format!(
                "r_min must lie in (0, 1/K): got {} with K = {}",
                self.r_min, self.codebook_size
            ));
        }
        let grid = self.img_size / self.patch_size;
        if self.recon_grid == 0 || self.recon_grid > grid {
            return fail(format!(
                "recon_grid {} must lie in [1, {grid}]",
                self.recon_grid
            ));
        }
        if self.pia_layers == 0 {
            return fail("pia_layers must be >= 1".into());
        }
        if self.pointness_window < 3 || self.pointness_window % 2 == 0 {
            return fail(format!(
                "pointness_window must be odd and >= 3, got {}",
                self.pointness_window
            ));
        }
        if !(self.pointness_kappa > 0.0 && self.pointness_kappa < 0.25) {
            return fail(format!(
                "pointness_kappa must lie in (0, 0.25), got {}",
                self.pointness_kappa
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.grad_clip < 0.0 {
            return fail(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        for (name, w) in [("warp_train", self.warp_train), ("warp_test", self.warp_test)] {
            if !(0.0..=1.0).contains(&w) {
                return fail(format!("{name} must lie in [0, 1], got {w}"));
            }
        }
        if self.n_train == 0 || self.n_test == 0 {
            return fail("n_train and n_test must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }
}

/// A config document: model settings plus optional paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file path.
    pub data: Option<PathBuf>,
    /// Output directory for history, checkpoints and dumps.
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config parse: {e}")))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config write: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.serialize()?)?;
        Ok(())
    }
}
