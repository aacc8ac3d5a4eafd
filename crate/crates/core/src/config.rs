//! Run configuration.
//!
//! Every config is a flat struct of typed scalars, read from and written to a
//! `key = value` text file (a flat TOML table). The canonical text form is
//! what checkpoints embed, so field order here is part of the format.

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the video and conditioning streams plus the DiT shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    /// Pixel frames `F`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Spatial patch edge `p`.
    pub patch: usize,
    pub temporal_stride: usize,
    /// Average-pooling factor inside each patch; the latent keeps
    /// `(patch / latent_pool)²·3` channels per token.
    pub latent_pool: usize,
    /// Audio tokens per latent frame, `l′`.
    pub tokens_per_frame: usize,
    /// Envelope samples summarized by one audio token.
    pub samples_per_token: usize,
    /// Face crop (square) fed to the identity encoder.
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_size: usize,
    pub depth: usize,
    /// Model width `c`.
    pub width_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_id: usize,
    /// Audio token width `c_a`.
    pub audio_width: usize,
    /// Channels of the identity encoder's convolution.
    pub id_channels: usize,
    /// Audio cross-attention weight `λ1`.
    pub lambda_audio: f32,
    /// Identity cross-attention weight `λ2`.
    pub lambda_id: f32,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            patch: 8,
            temporal_stride: 1,
            latent_pool: 2,
            tokens_per_frame: 4,
            samples_per_token: 16,
            crop_top: 2,
            crop_left: 12,
            crop_size: 16,
            depth: 4,
            width_model: 64,
            heads: 4,
            mlp_ratio: 4,
            n_id: 4,
            audio_width: 16,
            id_channels: 16,
            lambda_audio: 1.0,
            lambda_id: 0.5,
        }
    }
}

impl DiTConfig {
    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            height: 8,
            width: 8,
            patch: 4,
            tokens_per_frame: 2,
            samples_per_token: 4,
            crop_top: 0,
            crop_left: 0,
            crop_size: 4,
            depth: 2,
            width_model: 16,
            heads: 2,
            mlp_ratio: 2,
            n_id: 2,
            audio_width: 8,
            id_channels: 4,
            ..Self::default()
        }
    }

    pub fn latent_frames(&self) -> usize {
        self.frames / self.temporal_stride
    }

    pub fn latent_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn latent_w(&self) -> usize {
        self.width / self.patch
    }

    /// Tokens per latent frame, `h·w`.
    pub fn frame_tokens(&self) -> usize {
        self.latent_h() * self.latent_w()
    }

    /// Video token count `f·h·w`.
    pub fn tokens(&self) -> usize {
        self.latent_frames() * self.frame_tokens()
    }

    /// Latent channel count (one pooled, flattened patch).
    pub fn latent_channels(&self) -> usize {
        let q = self.patch / self.latent_pool;
        self.temporal_stride * q * q * 3
    }

    /// Audio token count `l`.
    pub fn audio_tokens(&self) -> usize {
        self.latent_frames() * self.tokens_per_frame
    }

    pub fn envelope_len(&self) -> usize {
        self.audio_tokens() * self.samples_per_token
    }

    pub fn head_dim(&self) -> usize {
        self.width_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.patch == 0 || self.temporal_stride == 0 {
            return fail("video dimensions and strides must be positive".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!("{}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.latent_pool == 0 || self.patch % self.latent_pool != 0 {
            return fail(format!("patch {} not divisible by latent pool {}", self.patch, self.latent_pool));
        }
        if self.frames % self.temporal_stride != 0 {
            return fail(format!("{} frames not divisible by temporal stride {}", self.frames, self.temporal_stride));
        }
        if self.heads == 0 || self.width_model % self.heads != 0 {
            return fail(format!("width {} is not heads·head_dim for {} heads", self.width_model, self.heads));
        }
        if self.tokens_per_frame == 0 || self.samples_per_token == 0 {
            return fail("audio token rates must be positive".into());
        }
        if self.depth == 0 || self.n_id == 0 || self.audio_width == 0 || self.id_channels == 0 || self.mlp_ratio == 0 {
            return fail("depth, n_id and widths must be positive".into());
        }
        if self.crop_size < 2 || self.crop_size % 2 != 0 {
            return fail(format!("crop size {} must be even", self.crop_size));
        }
        if self.crop_top + self.crop_size > self.height || self.crop_left + self.crop_size > self.width {
            return fail("face crop exceeds the frame".into());
        }
        if !(self.lambda_audio >= 0.0 && self.lambda_id >= 0.0) {
            return fail("cross-attention weights must be nonnegative".into());
        }
        Ok(())
    }
}

/// Which audio scoping a forward pass (and a training stage) uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Every video token attends to the whole audio clip.
    ClipLevel,
    /// Frame `i` attends only to its own audio segment.
    FrameLevel,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ClipLevel => "clip-level",
            Stage::FrameLevel => "frame-level",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip-level" | "clip" => Ok(Stage::ClipLevel),
            "frame-level" | "frame" => Ok(Stage::FrameLevel),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Optimization schedule. The optimizer is Adam with fixed
/// `β1 = 0.9, β2 = 0.999, ε = 1e-8`, no weight decay, constant learning rate,
/// identical in both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps_clip: usize,
    pub steps_frame: usize,
    pub learning_rate: f32,
    /// Probability threshold of the lip-mask gate; the masked loss is used when a
    /// uniform draw exceeds it.
    pub eta: f32,
    pub lambda_audio: f32,
    pub lambda_id: f32,
    pub drop_audio: f32,
    pub drop_identity: f32,
    pub drop_reference: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at stage boundaries).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_clip: 2000,
            steps_frame: 500,
            learning_rate: 1e-4,
            eta: 0.2,
            lambda_audio: 1.0,
            lambda_id: 0.5,
            drop_audio: 0.1,
            drop_identity: 0.1,
            drop_reference: 0.1,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f32| (0.0..=1.0).contains(&x);
        if !unit(self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        for (name, p) in [
            ("drop_audio", self.drop_audio),
            ("drop_identity", self.drop_identity),
            ("drop_reference", self.drop_reference),
        ] {
            if !unit(p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.lambda_audio >= 0.0 && self.lambda_id >= 0.0) {
            return Err(Error::Config("cross-attention weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Inference settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// Audio guidance scale `s`.
    pub cfg_scale: f32,
    pub motion_l: f32,
    pub motion_b: f32,
    pub seed: u64,
    /// Also drop identity and reference in the unconditional branch.
    pub joint_uncond: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            cfg_scale: 4.5,
            motion_l: 0.5,
            motion_b: 0.5,
            seed: 0,
            joint_uncond: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} must be ≥ 0", self.cfg_scale)));
        }
        for (n, w) in [("motion_l", self.motion_l), ("motion_b", self.motion_b)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{n} {w} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Corpus size and seed for generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 256, seed: 0 }
    }
}

/// Everything one command may need, as `[data]`, `[model]`, `[train]` and
/// `[sample]` tables of flat keys. Missing tables and keys keep defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DiTConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()
    }
}

/// Canonical `key = value` text for a flat config.
pub fn to_text<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Parses flat `key = value` text; absent keys keep their defaults and
/// unknown keys are rejected.
pub fn from_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}
