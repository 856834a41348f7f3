use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2dGeometry, ConvTransposeGeometry};

/// Number of frequency bins of the model input (512-point FFT).
pub const INPUT_BINS: usize = 257;
/// Input planes: far-end real/imag, microphone real/imag.
pub const INPUT_PLANES: usize = 4;
/// Output planes: mask real/imag.
pub const OUTPUT_PLANES: usize = 2;

/// Which collaboration-module branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub tpb: bool,
    pub tnb: bool,
    pub ib: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles { tpb: true, tnb: true, ib: true };

    pub fn validate(&self) -> Result<()> {
        if self.ib && !(self.tpb && self.tnb) {
            return Err(Error::Config(
                "the interactive block needs both the target-positive and target-negative blocks".into(),
            ));
        }
        Ok(())
    }

    /// All branches off: the collaboration module is replaced by the
    /// substitute attention stack.
    pub fn is_substitute(&self) -> bool {
        !self.tpb && !self.tnb && !self.ib
    }
}

/// The five ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationCase {
    Case1,
    Case2,
    Case3,
    Case4,
    Case5,
}

impl AblationCase {
    pub const ALL: [AblationCase; 5] = [Self::Case1, Self::Case2, Self::Case3, Self::Case4, Self::Case5];

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::Case1),
            2 => Ok(Self::Case2),
            3 => Ok(Self::Case3),
            4 => Ok(Self::Case4),
            5 => Ok(Self::Case5),
            _ => Err(Error::Config(format!("ablation case must be 1..=5, got {i}"))),
        }
    }

    /// The case with exactly these toggles, if any.
    pub fn from_toggles(t: Toggles) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.toggles() == t)
    }

    pub fn index(self) -> u8 {
        self as u8 + 1
    }

    pub fn toggles(self) -> Toggles {
        let (tpb, tnb, ib) = match self {
            Self::Case1 => (true, true, true),
            Self::Case2 => (true, false, false),
            Self::Case3 => (false, true, false),
            Self::Case4 => (true, true, false),
            Self::Case5 => (false, false, false),
        };
        Toggles { tpb, tnb, ib }
    }
}

impl fmt::Display for AblationCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Case {}", self.index())
    }
}

/// Architecture hyperparameters. Kernels and strides are `(time, frequency)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_channels: [usize; 3],
    pub encoder_kernel: (usize, usize),
    pub encoder_strides: [(usize, usize); 3],
    pub decoder_channels: [usize; 3],
    pub decoder_kernel: (usize, usize),
    pub decoder_strides: [(usize, usize); 3],
    pub decoder_pointwise_kernel: (usize, usize),
    pub cm_conv_kernel: (usize, usize),
    pub cm_conv_stride: (usize, usize),
    pub fc_kernel: (usize, usize),
    /// Width of the keys, values and queries inside each feature catcher.
    pub attention_dim: usize,
    pub gru_hidden: usize,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size network.
    pub fn full() -> Self {
        Self {
            encoder_channels: [16, 32, 64],
            encoder_kernel: (3, 5),
            encoder_strides: [(1, 1), (1, 2), (1, 2)],
            decoder_channels: [32, 16, 2],
            decoder_kernel: (3, 5),
            decoder_strides: [(1, 2), (1, 2), (1, 1)],
            decoder_pointwise_kernel: (1, 1),
            cm_conv_kernel: (3, 7),
            cm_conv_stride: (1, 1),
            fc_kernel: (1, 1),
            attention_dim: 64,
            gru_hidden: 1,
            toggles: Toggles::ALL,
            seed: 0,
        }
    }

    /// Small network for tests and desk-scale runs.
    pub fn toy() -> Self {
        Self {
            encoder_channels: [4, 8, 16],
            decoder_channels: [8, 4, 2],
            attention_dim: 8,
            ..Self::full()
        }
    }

    pub fn with_case(mut self, case: AblationCase) -> Self {
        self.toggles = case.toggles();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels[2]
    }

    /// Frequency extent at the input of each encoder stage and at the
    /// bottleneck: `[257, f1, f2, f3]`.
    pub fn frequency_chain(&self) -> Result<[usize; 4]> {
        let (kt, kf) = self.encoder_kernel;
        let mut f = [INPUT_BINS; 4];
        for s in 0..3 {
            let geo = Conv2dGeometry::causal(self.encoder_kernel, self.encoder_strides[s]);
            f[s + 1] = geo.output_extent(1, f[s], kt, kf)?.1;
        }
        Ok(f)
    }

    pub fn bottleneck_bins(&self) -> Result<usize> {
        Ok(self.frequency_chain()?[3])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.toggles.validate()?;
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.decoder_channels[2] != OUTPUT_PLANES {
            return bad(format!("last decoder stage must produce {OUTPUT_PLANES} channels"));
        }
        let kernels = [self.encoder_kernel, self.decoder_kernel, self.cm_conv_kernel];
        if kernels.iter().any(|k| k.0 == 0 || k.1 % 2 == 0) {
            return bad("kernels need a positive time extent and an odd frequency extent".into());
        }
        if self
            .encoder_strides
            .iter()
            .chain(&self.decoder_strides)
            .any(|s| s.0 != 1 || s.1 == 0)
        {
            return bad("time strides must be 1 and frequency strides positive".into());
        }
        if self.cm_conv_stride != (1, 1) {
            return bad("collaboration-module convolutions must be shape preserving (stride (1,1))".into());
        }
        if self.fc_kernel != (1, 1) || self.decoder_pointwise_kernel != (1, 1) {
            return bad("feature-catcher and decoder projections must be pointwise (1,1)".into());
        }
        if self.attention_dim == 0 || self.gru_hidden == 0 {
            return bad("attention_dim and gru_hidden must be positive".into());
        }
        let f = self.frequency_chain()?;
        // decoder block k restores the extent at the input of encoder stage 2 - k
        let mut deep = f[3];
        for k in 0..3 {
            let target = f[2 - k];
            let geo = ConvTransposeGeometry::causal(1, self.decoder_kernel, self.decoder_strides[k], target);
            let reach = (deep - 1) * geo.stride.1 + self.decoder_kernel.1 + geo.stride.1 - 1;
            if geo.crop_left + target > reach {
                return bad(format!(
                    "decoder stage {} cannot reach {} bins from {} with stride {:?}",
                    k + 1,
                    target,
                    deep,
                    self.decoder_strides[k]
                ));
            }
            deep = target;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
