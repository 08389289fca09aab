use std::fmt;
use std::str::FromStr;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    ResnetSe,
    EcapaTdnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderKind {
    Transformer,
    Conformer,
    CrossAttention,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, $($variant:path => $s:literal),+) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($variant => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = CoreError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($variant),)+
                    _ => Err(CoreError::config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        s,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(Preset, "preset", Preset::Toy => "toy", Preset::Full => "full");
str_enum!(EncoderKind, "encoder kind", EncoderKind::ResnetSe => "resnet_se", EncoderKind::EcapaTdnn => "ecapa_tdnn");
str_enum!(
    DecoderKind,
    "decoder kind",
    DecoderKind::Transformer => "transformer",
    DecoderKind::Conformer => "conformer",
    DecoderKind::CrossAttention => "cross_attention"
);

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::Transformer, DecoderKind::Conformer, DecoderKind::CrossAttention];
}

/// Frame-level speaker encoder (also the trunk of the utterance extractor).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub preset: Preset,
    /// Stage widths for `resnet_se`; a single width for `ecapa_tdnn`.
    pub channels: Vec<usize>,
    pub se_channels: usize,
    pub embed_dim: usize,
    pub n_mels: usize,
}

impl EncoderConfig {
    pub fn preset(kind: EncoderKind, preset: Preset, n_mels: usize) -> Self {
        let (channels, se_channels, embed_dim) = match (kind, preset) {
            (EncoderKind::ResnetSe, Preset::Toy) => (vec![16, 16, 32, 32], 8, 32),
            (EncoderKind::ResnetSe, Preset::Full) => (vec![32, 64, 128, 256], 256, 128),
            (EncoderKind::EcapaTdnn, Preset::Toy) => (vec![32], 8, 32),
            (EncoderKind::EcapaTdnn, Preset::Full) => (vec![1024], 128, 192),
        };
        Self {
            kind,
            preset,
            channels,
            se_channels,
            embed_dim,
            n_mels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CoreError::config("encoder channels must be a non-empty list of positive widths"));
        }
        if self.kind == EncoderKind::EcapaTdnn && self.channels.len() != 1 {
            return Err(CoreError::config("ecapa_tdnn takes a single channel width"));
        }
        if self.se_channels == 0 || self.embed_dim == 0 || self.n_mels == 0 {
            return Err(CoreError::config("encoder se_channels, embed_dim and n_mels must be positive"));
        }
        if self.preset == Preset::Toy
            && (self.channels.iter().chain([&self.se_channels, &self.embed_dim]).any(|&c| c > 32))
        {
            return Err(CoreError::config("toy preset dimensions must not exceed 32"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipEncoderConfig {
    /// Lip ROI feature size `D_v`.
    pub input_dim: usize,
    /// Output embedding size `D_l`.
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub conv_kernel: usize,
    /// Acoustic frames per video frame.
    pub upsample: usize,
}

impl Default for LipEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            embed_dim: 16,
            heads: 2,
            ffn_dim: 32,
            layers: 2,
            conv_kernel: 3,
            upsample: 4,
        }
    }
}

impl LipEncoderConfig {
    /// Acoustic-to-video rate ratio, which must be a whole number.
    pub fn upsample_for(video_fps: f64, frame_hop_s: f64) -> Result<usize> {
        let r = 1.0 / (video_fps * frame_hop_s);
        let n = r.round();
        if n < 1.0 || (r - n).abs() > 1e-9 {
            return Err(CoreError::config(format!(
                "video rate {} fps does not divide the acoustic frame rate {} fps",
                video_fps,
                1.0 / frame_hop_s
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.upsample == 0 {
            return Err(CoreError::config("lip encoder dimensions must be positive"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(CoreError::config(format!(
                "lip embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(CoreError::config("lip conv kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub num_speakers: usize,
}

impl DecoderConfig {
    pub fn toy(kind: DecoderKind, num_speakers: usize) -> Self {
        Self {
            kind,
            layers: 2,
            heads: 2,
            model_dim: 32,
            ffn_dim: 64,
            conv_kernel: 15,
            num_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0 {
            return Err(CoreError::config("decoder needs at least one speaker"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(CoreError::config(format!(
                "decoder model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(CoreError::config("decoder layers and ffn_dim must be positive"));
        }
        if self.kind == DecoderKind::Conformer && self.conv_kernel.is_multiple_of(2) {
            return Err(CoreError::config("conformer conv kernel must be odd"));
        }
        Ok(())
    }
}

/// Everything needed to build the parameter set of a full system.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lip: LipEncoderConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn toy(kind: DecoderKind, num_speakers: usize, n_mels: usize) -> Self {
        Self {
            lip: LipEncoderConfig::default(),
            encoder: EncoderConfig::preset(EncoderKind::ResnetSe, Preset::Toy, n_mels),
            decoder: DecoderConfig::toy(kind, num_speakers),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lip.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()
    }
}
