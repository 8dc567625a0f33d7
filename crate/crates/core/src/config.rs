//! Architecture and run configuration, readable from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Architectural variant; `Full` is the complete dual-encoder model, the others are ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TransformerOnly,
    UnetOnly,
    ConcatFusion,
    BilinearFusionNoRfb,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TransformerOnly,
        Variant::UnetOnly,
        Variant::ConcatFusion,
        Variant::BilinearFusionNoRfb,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TransformerOnly => "transformer_only",
            Variant::UnetOnly => "unet_only",
            Variant::ConcatFusion => "concat_fusion",
            Variant::BilinearFusionNoRfb => "bilinear_fusion_no_rfb",
            Variant::Full => "full",
        }
    }

    pub fn uses_unet(self) -> bool {
        self != Variant::TransformerOnly
    }

    pub fn uses_transformer(self) -> bool {
        self != Variant::UnetOnly
    }

    pub fn uses_rfb(self) -> bool {
        matches!(self, Variant::Full | Variant::ConcatFusion | Variant::UnetOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Channels of the first encoder stage; later stages double it.
    pub base_width: usize,
    /// Token embedding dimension.
    pub embed_dim: usize,
    pub patch_size: usize,
    /// Number of transformer layers.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the depthwise kernel over the key grid.
    pub context_kernel: usize,
    /// Square input extent; fixes the number of positional embeddings.
    pub image_size: usize,
    /// Two conv-bn-relu blocks per encoder and decoder stage instead of one.
    pub double_conv: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            base_width: 16,
            embed_dim: 64,
            patch_size: 16,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            context_kernel: 3,
            image_size: 128,
            double_conv: false,
        }
    }
}

pub const STAGES: usize = 5;

impl ArchConfig {
    /// Desk configuration at a given input extent.
    pub fn desk(variant: Variant, image_size: usize) -> Self {
        Self {
            variant,
            image_size,
            ..Self::default()
        }
    }

    /// Channel width of encoder stage `i`.
    pub fn stage_width(&self, i: usize) -> usize {
        self.base_width << i
    }

    /// Channel count at the fusion point.
    pub fn fused_width(&self) -> usize {
        self.stage_width(STAGES - 1)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn bottleneck(&self) -> usize {
        self.image_size >> STAGES
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_width == 0 || self.embed_dim == 0 || self.heads == 0 || self.depth == 0 {
            return fail("widths, heads and depth must be positive".into());
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 {
            return fail("patch_size and mlp_ratio must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.context_kernel.is_multiple_of(2) {
            return fail(format!("context_kernel {} must be odd", self.context_kernel));
        }
        let unit = self.patch_size.max(1 << STAGES);
        if self.image_size == 0 || !self.image_size.is_multiple_of(unit) || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of {} and of patch_size {}",
                self.image_size, unit, self.patch_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Per-channel multipliers (disc, cup).
    pub channel_weights: [f64; 2],
    /// Evaluate training-set DSC every this many steps (0 disables).
    pub eval_every: usize,
    /// Stop once disc and cup DSC reach these targets at an evaluation.
    pub target_disc_dsc: Option<f64>,
    pub target_cup_dsc: Option<f64>,
    /// Random horizontal flips and small rotations of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            channel_weights: [1.0, 1.0],
            eval_every: 0,
            target_disc_dsc: None,
            target_cup_dsc: None,
            augment: false,
        }
    }
}

/// Parameters of the synthetic fundus-like generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    /// Vertical disc semi-axis range as fractions of the image size.
    pub disc_axis: [f64; 2],
    /// Cup-to-disc ratio range.
    pub ratio: [f64; 2],
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            size: 128,
            disc_axis: [0.18, 0.3],
            ratio: [0.3, 0.7],
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Dataset directory; when absent, `synthetic` describes generated data.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    pub output_dir: PathBuf,
    /// Defaults to `output_dir/model.utnc`.
    pub checkpoint: Option<PathBuf>,
    /// Dataset fractions held out from training, assigned by a seeded shuffle.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            output_dir: PathBuf::from("run"),
            checkpoint: None,
            val_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

impl IoConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.utnc"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.weights.validate()?;
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.io.dataset.is_some() && self.io.synthetic.is_some() {
            return Err(Error::Config("set either io.dataset or io.synthetic, not both".into()));
        }
        if let Some(s) = &self.io.synthetic {
            s.validate()?;
        }
        Ok(())
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.ratio;
        if !(0.0 < r0 && r0 <= r1 && r1 < 1.0) {
            return Err(Error::Config(format!("ratio range {:?} must lie in (0, 1)", self.ratio)));
        }
        let [a0, a1] = self.disc_axis;
        if !(0.0 < a0 && a0 <= a1 && a1 < 0.5) {
            return Err(Error::Config(format!("disc_axis range {:?} must lie in (0, 0.5)", self.disc_axis)));
        }
        if self.size < 8 {
            return Err(Error::Config("size must be at least 8".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}
