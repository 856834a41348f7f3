//! Classical signal processing: framing and overlap-add, delay alignment,
//! complex ratio masks, and the level/quality measures used for mixing and
//! evaluation.

mod crm;
pub mod differentiable;
mod gcc;
mod metrics;
mod stft;
mod wav;

pub use crm::{complex_product, crm_apply, crm_compute, CRMask, CRM_CLIP, CRM_DENOM_FLOOR};
pub use gcc::{gcc_phat_align, Alignment, AlignmentStatus, DEFAULT_MAX_DELAY_S, MIN_PEAK_TO_MEAN};
pub use metrics::{
    active_power, erle, level_ratio_db, scale_to_ratio, si_snr, RatioKind, ACTIVE_THRESHOLD, ERLE_CAP_DB,
    ERLE_EPS, SI_SNR_CAP_DB, SI_SNR_EPS,
};
pub use stft::{istft, stft, ComplexSpectrogram, Stft, StftConfig};
pub use wav::{read_wav, write_wav, write_wav_f32};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// 16 kHz waveform; rejects non-finite samples.
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        Self::with_rate(samples, SAMPLE_RATE)
    }

    pub fn with_rate(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of waveform")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; lengths must match.
    pub fn add(&self, other: &Waveform) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Contract(format!(
                "cannot add waveforms of {} and {} samples",
                self.len(),
                other.len()
            )));
        }
        Ok(Self {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            sample_rate: self.sample_rate,
        })
    }
}
