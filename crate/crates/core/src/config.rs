//! Architecture, training and rendering configuration.
//!
//! Every struct deserializes with unknown keys rejected; fields missing from a
//! document take the desk-scale defaults. `validate` checks the cross-field
//! invariants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    /// Channels of the stem output `X_0`.
    pub stem_channels: usize,
    pub stage_units: [usize; 5],
    pub stage_channels: [usize; 5],
    pub model_dim: usize,
    pub n_transformer_units: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_iterations: usize,
    pub share_encoder_weights: bool,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_h: 16,
            input_w: 64,
            input_channels: 3,
            stem_channels: 8,
            stage_units: [1, 1, 1, 1, 1],
            stage_channels: [8, 16, 16, 32, 32],
            model_dim: 32,
            n_transformer_units: 2,
            n_heads: 4,
            ffn_dim: 64,
            n_iterations: 2,
            share_encoder_weights: true,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    /// Full-size settings: ResNet-25 unit counts, model size 512, 32×128
    /// input, three iterations.
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_h: 32,
            input_w: 128,
            input_channels: 3,
            stem_channels: 32,
            stage_units: [2, 2, 3, 3, 2],
            stage_channels: [32, 64, 128, 256, 512],
            model_dim: 512,
            n_transformer_units: 3,
            n_heads: 8,
            ffn_dim: 2048,
            n_iterations: 3,
            share_encoder_weights: true,
            positional_encoding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels[4] != self.model_dim {
            return Err(cfg_err(format!(
                "stage_channels[4] ({}) must equal model_dim ({})",
                self.stage_channels[4], self.model_dim
            )));
        }
        if !self.input_h.is_multiple_of(4) || !self.input_w.is_multiple_of(4) || self.input_h == 0 || self.input_w == 0 {
            return Err(cfg_err(format!(
                "input {}x{} must be divisible by 4",
                self.input_h, self.input_w
            )));
        }
        if self.n_iterations < 1 {
            return Err(cfg_err("n_iterations must be >= 1"));
        }
        if self.stage_units.contains(&0) {
            return Err(cfg_err("every stage needs at least one residual unit"));
        }
        if self.stage_channels.contains(&0) || self.stem_channels == 0 || self.input_channels == 0 {
            return Err(cfg_err("channel counts must be positive"));
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(cfg_err(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.positional_encoding && !self.model_dim.is_multiple_of(4) {
            return Err(cfg_err("2D positional encoding needs model_dim divisible by 4"));
        }
        if self.ffn_dim == 0 {
            return Err(cfg_err("ffn_dim must be positive"));
        }
        Ok(())
    }

    /// Spatial extent of the semantic grid, `(H/4, W/4)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_h / 4, self.input_w / 4)
    }

    pub fn seq_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Maximum character sequence length including the end token.
    pub max_len: usize,
    pub num_classes: usize,
    pub model_dim: usize,
    pub unet_depth: usize,
    pub unet_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            max_len: 8,
            num_classes: 37,
            model_dim: 32,
            unet_depth: 2,
            unet_channels: 16,
        }
    }
}

impl DecoderConfig {
    pub fn full_scale() -> Self {
        DecoderConfig {
            max_len: 26,
            num_classes: 37,
            model_dim: 512,
            unet_depth: 2,
            unet_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(cfg_err("max_len must be >= 2"));
        }
        if self.num_classes < 2 {
            return Err(cfg_err("num_classes must be >= 2"));
        }
        if !self.model_dim.is_multiple_of(2) || self.model_dim == 0 {
            return Err(cfg_err("decoder model_dim must be even"));
        }
        if self.unet_depth == 0 || self.unet_channels == 0 {
            return Err(cfg_err("mini U-Net needs positive depth and channels"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub n_blocks: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_iterations: usize,
    pub mask_self_position: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            n_blocks: 2,
            max_len: 8,
            num_classes: 37,
            model_dim: 32,
            n_heads: 4,
            ffn_dim: 64,
            n_iterations: 2,
            mask_self_position: true,
        }
    }
}

impl LmConfig {
    pub fn full_scale() -> Self {
        LmConfig {
            n_blocks: 3,
            max_len: 26,
            num_classes: 37,
            model_dim: 512,
            n_heads: 8,
            ffn_dim: 2048,
            n_iterations: 3,
            mask_self_position: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 {
            return Err(cfg_err("LM needs at least one block"));
        }
        if self.n_iterations < 1 {
            return Err(cfg_err("LM n_iterations must be >= 1"));
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) || !self.model_dim.is_multiple_of(2) {
            return Err(cfg_err("LM model_dim must be even and divisible by n_heads"));
        }
        if self.mask_self_position && self.max_len < 2 {
            return Err(cfg_err("self-position masking needs max_len >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub lm: LmConfig,
}

impl ModelConfig {
    /// Desk-scale configuration used by the gradient and structural suites:
    /// 16×64 input, C=32, N=2, M=2, T=8, D=37.
    pub fn toy() -> Self {
        Self::default()
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full_scale(),
            decoder: DecoderConfig::full_scale(),
            lm: LmConfig::full_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.lm.validate()?;
        let c = self.encoder.model_dim;
        if self.decoder.model_dim != c || self.lm.model_dim != c {
            return Err(cfg_err(format!(
                "model_dim mismatch: encoder {c}, decoder {}, lm {}",
                self.decoder.model_dim, self.lm.model_dim
            )));
        }
        if self.decoder.max_len != self.lm.max_len || self.decoder.num_classes != self.lm.num_classes {
            return Err(cfg_err("decoder and LM disagree on max_len or num_classes"));
        }
        let (gh, gw) = self.encoder.grid();
        let div = 1 << self.decoder.unet_depth;
        if gh % div != 0 || gw % div != 0 {
            return Err(cfg_err(format!(
                "semantic grid {gh}x{gw} not divisible by 2^unet_depth = {div}"
            )));
        }
        Ok(())
    }

    /// Sets the iteration counts N (vision) and M (language).
    pub fn with_iterations(mut self, n: usize, m: usize) -> Self {
        self.encoder.n_iterations = n;
        self.lm.n_iterations = m;
        self
    }
}

/// Which loss the training loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Vision terms only: `Σ_i L_v^i`.
    Vm,
    /// Vision plus language and fusion terms for every `(i, j)`.
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_decay: f64,
    /// First (0-based) epoch trained at `lr_after_decay`.
    pub decay_epoch: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub objective: Objective,
    /// Attach losses to every iteration, not only the last.
    pub intermediate_supervision: bool,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_initial: 1e-4,
            lr_after_decay: 1e-5,
            decay_epoch: 6,
            total_epochs: 8,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            objective: Objective::Full,
            intermediate_supervision: true,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be positive"));
        }
        let lr_ok = self.lr_after_decay > 0.0 && self.lr_after_decay < self.lr_initial;
        if !lr_ok {
            return Err(cfg_err("need 0 < lr_after_decay < lr_initial"));
        }
        if self.decay_epoch >= self.total_epochs {
            return Err(cfg_err(format!(
                "decay_epoch {} must be < total_epochs {}",
                self.decay_epoch, self.total_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(cfg_err("invalid Adam hyper-parameters"));
        }
        Ok(())
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr_initial
        } else {
            self.lr_after_decay
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 16,
            width: 64,
            channels: 3,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(cfg_err("renders are RGB: channels must be 3"));
        }
        if self.height < 9 || self.width < 8 {
            return Err(cfg_err("render size too small for the 7x5 glyph atlas"));
        }
        Ok(())
    }
}

/// Which words a generated dataset may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WordSplit {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Severities drawn uniformly per sample.
    pub severities: Vec<f64>,
    /// Probability that a label is a word-list entry rather than a random string.
    pub word_fraction: f64,
    pub word_split: WordSplit,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 2000,
            min_len: 3,
            max_len: 7,
            severities: vec![0.3, 0.6, 0.9],
            word_fraction: 0.7,
            word_split: WordSplit::All,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(cfg_err("dataset n must be >= 1"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(cfg_err("need 1 <= min_len <= max_len"));
        }
        if self.severities.is_empty() || self.severities.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(cfg_err("severities must be a non-empty list in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.word_fraction) {
            return Err(cfg_err("word_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything one CLI invocation needs, serialized as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub data: DatasetConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.render.validate()?;
        self.data.validate()?;
        let e = &self.model.encoder;
        if (e.input_h, e.input_w, e.input_channels) != (self.render.height, self.render.width, self.render.channels) {
            return Err(cfg_err(format!(
                "render size {}x{}x{} differs from model input {}x{}x{}",
                self.render.channels, self.render.height, self.render.width, e.input_channels, e.input_h, e.input_w
            )));
        }
        if self.data.max_len + 1 > self.model.decoder.max_len {
            return Err(cfg_err(format!(
                "labels up to {} chars need max_len >= {}",
                self.data.max_len,
                self.data.max_len + 1
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
