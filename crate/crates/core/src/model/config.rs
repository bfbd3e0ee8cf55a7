use crate::error::{Error, Result};

/// Number of encoder / decoder levels.
pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of each level.
    pub channels: [usize; LEVELS],
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 128, 256],
            input_size: 352,
        }
    }
}

impl EncoderConfig {
    /// Downsampling factor of each level: 2, 4, 8, 16, 32.
    pub fn strides(&self) -> [usize; LEVELS] {
        [2, 4, 8, 16, 32]
    }

    /// Spatial side of level `i` (0-based).
    pub fn level_size(&self, i: usize) -> usize {
        self.input_size / self.strides()[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MftConfig {
    /// Attention heads.
    pub nh: usize,
    /// Token width.
    pub d_m: usize,
    /// Per-head query/key width, also the value width.
    pub d_k: usize,
    /// Stacked transformer layers.
    pub layers: usize,
    /// Filter groups.
    pub groups: usize,
    /// Dynamic kernel side.
    pub kernel: usize,
    /// FFN hidden width as a multiple of `d_m`.
    pub ffn_mult: usize,
}

impl Default for MftConfig {
    fn default() -> Self {
        MftConfig {
            nh: 8,
            d_m: 384,
            d_k: 12,
            layers: 6,
            groups: 8,
            kernel: 3,
            ffn_mult: 4,
        }
    }
}

impl MftConfig {
    /// Width of the concatenated heads.
    pub fn inner(&self) -> usize {
        self.nh * self.d_k
    }

    pub fn validate(&self, modality_channels: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.nh == 0 || self.d_k == 0 {
            return bad("nh and d_k must be positive".into());
        }
        if !self.d_m.is_multiple_of(4) {
            return bad(format!(
                "d_m {} must be divisible by 4 for the positional encoding",
                self.d_m
            ));
        }
        if self.d_m != 3 * modality_channels {
            return bad(format!(
                "d_m {} must equal 3 × level-5 modality channels {}",
                self.d_m, modality_channels
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("dynamic kernel {} must be odd", self.kernel));
        }
        if self.groups == 0 || !modality_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "groups {} must divide {modality_channels}",
                self.groups
            ));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers and ffn_mult must be positive".into());
        }
        Ok(())
    }
}

/// What fuses the three streams at the coarsest level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    /// Transformer plus modality-specific filters.
    #[default]
    Mft,
    /// Plain squeeze-and-expand convolutions, as at the other levels.
    Conv,
    /// A single-head non-local block followed by squeeze-and-expand.
    NonLocal,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mft" => Ok(Fusion::Mft),
            "conv" => Ok(Fusion::Conv),
            "nonlocal" | "non-local" => Ok(Fusion::NonLocal),
            _ => Err(Error::Config(format!(
                "unknown fusion '{s}' (mft, conv, nonlocal)"
            ))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Mft => "mft",
            Fusion::Conv => "conv",
            Fusion::NonLocal => "nonlocal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Per-modality decoder channels of each level.
    pub decoder_channels: [usize; LEVELS],
    pub mft: MftConfig,
    pub fusion: Fusion,
    /// Modality-specific filtering after the transformer; off feeds the
    /// projected transformer output straight into the residual.
    pub msf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_channels: [16, 32, 64, 128, 128],
            mft: MftConfig::default(),
            fusion: Fusion::Mft,
            msf: true,
        }
    }
}

impl ModelConfig {
    /// Small model on 64×64 inputs for gradient checks and quick tests.
    pub fn reduced() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                channels: [4, 4, 8, 8, 16],
                input_size: 64,
            },
            decoder_channels: [2, 4, 4, 8, 8],
            mft: MftConfig {
                nh: 2,
                d_m: 24,
                d_k: 12,
                layers: 2,
                groups: 4,
                kernel: 3,
                ffn_mult: 2,
            },
            fusion: Fusion::Mft,
            msf: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.encoder.input_size;
        if s < 32 || !s.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size {s} must be a positive multiple of 32"
            )));
        }
        if self.encoder.channels.contains(&0) || self.decoder_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.fusion == Fusion::Mft {
            self.mft.validate(self.decoder_channels[LEVELS - 1])?;
        }
        Ok(())
    }
}
