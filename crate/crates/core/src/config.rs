//! Run configuration, serialised as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::suppression::RampSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Momentum (EMA) target network, normalised MSE distance.
    Byol,
    /// Shared weights with stop-gradient, negative cosine distance.
    Simsiam,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Byol => "byol",
            Mode::Simsiam => "simsiam",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "byol" => Ok(Mode::Byol),
            "simsiam" => Ok(Mode::Simsiam),
            _ => Err(Error::Validation(format!("unknown mode '{s}' (expected byol or simsiam)"))),
        }
    }
}

/// Where the suppressed view's mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No suppressed term at all (the base framework).
    None,
    /// Highest channel-summed responses.
    Feasc,
    /// Uniformly random locations.
    Random,
    /// Lowest channel-summed responses.
    LowResponse,
    /// Highest responses, upsampled and applied to the input pixels before a
    /// second encoder pass.
    ImageSuppress,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Feasc,
        Strategy::Random,
        Strategy::LowResponse,
        Strategy::ImageSuppress,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Feasc => "feasc",
            Strategy::Random => "random",
            Strategy::LowResponse => "low_response",
            Strategy::ImageSuppress => "image_suppress",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown strategy '{s}' (expected one of none, feasc, random, low_response, image_suppress)"
                ))
            })
    }
}

/// Convolutional backbone: 3x3 conv-BN-ReLU blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub arch: String,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            arch: "convnet".into(),
            in_channels: 3,
            channels: vec![16, 32, 32],
            strides: vec![2, 1, 2],
        }
    }
}

impl EncoderSpec {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Spatial size of the final feature map for a square input.
    pub fn feature_size(&self, resolution: usize) -> usize {
        self.strides
            .iter()
            .fold(resolution, |s, &st| (s + 2 - 3) / st + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch != "convnet" {
            return Err(Error::Config(format!(
                "unsupported encoder architecture '{}'",
                self.arch
            )));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "encoder channels and strides must be non-empty and equally long".into(),
            ));
        }
        if self.in_channels == 0 || self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("encoder widths and strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSpec {
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            projector_hidden: 128,
            embed_dim: 64,
            predictor_hidden: 32,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.projector_hidden == 0 || self.embed_dim == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a pre-training run needs. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: u32,
    pub lambda: f64,
    /// BYOL target momentum.
    pub tau: f64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Route the suppressed path through the predictor as well as the projector.
    pub suppressed_through_predictor: bool,
    pub checkpoint_every: usize,
    /// Dataset manifest (JSON) or a class-per-directory image root.
    pub dataset: PathBuf,
    /// Stratified fraction of the training split to pre-train on.
    pub fraction: f64,
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Simsiam,
            epochs: 30,
            batch_size: 64,
            base_lr: 0.5,
            warmup_epochs: 6,
            momentum: 0.5,
            weight_decay: 1e-4,
            alpha: 0.2,
            beta: 20,
            lambda: 1.0,
            tau: 0.996,
            seed: 0,
            strategy: Strategy::Feasc,
            suppressed_through_predictor: true,
            checkpoint_every: 10,
            dataset: PathBuf::from("data/manifest.json"),
            fraction: 1.0,
            encoder: EncoderSpec::default(),
            head: HeadSpec::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn ramp(&self) -> RampSchedule {
        RampSchedule {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// The lambda actually applied: the `none` strategy has no suppressed term.
    pub fn effective_lambda(&self) -> f64 {
        if self.strategy == Strategy::None {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction must lie in (0, 1], got {}", self.fraction));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        self.ramp()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate()?;
        self.head.validate()?;
        self.augment
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Git-style content hash: SHA-256 over `"blob <len>\0" + toml`.
    pub fn content_hash(&self) -> String {
        content_hash(self.to_toml().as_bytes())
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex_string(&h.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
