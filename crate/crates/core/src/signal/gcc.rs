//! GCC-PHAT delay estimation between microphone and far-end reference.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_DELAY_S: f64 = 0.5;
/// Peak-to-mean ratio below which an estimate is flagged.
pub const MIN_PEAK_TO_MEAN: f64 = 4.0;
const PHAT_FLOOR: f64 = 1e-12;
/// Bins whose cross-power is below this fraction of the strongest bin are
/// weighted by magnitude instead of whitened.
const PHAT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignmentStatus {
    Confident,
    /// The in-window peak is weak, or a stronger peak lies outside the window.
    LowConfidence,
    /// Far-end reference is silent; no shift applied.
    NoSignal,
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub delay_samples: usize,
    pub aligned_far: Waveform,
    pub status: AlignmentStatus,
    /// In-window peak divided by the mean absolute correlation in the window.
    pub peak_to_mean: f64,
}

/// Estimates the constant delay by which the far-end signal appears in the
/// microphone, searching lags `0..=max_delay`, and returns the far-end signal
/// shifted accordingly (zero-padded, truncated to the microphone length).
pub fn gcc_phat_align(mic: &Waveform, far: &Waveform, max_delay_s: f64) -> Result<Alignment> {
    if mic.sample_rate() != far.sample_rate() {
        return Err(Error::Format(format!(
            "sample rates differ: {} vs {}",
            mic.sample_rate(),
            far.sample_rate()
        )));
    }
    let (m, x) = (mic.samples(), far.samples());
    if x.iter().all(|&v| v == 0.0) || m.is_empty() {
        return Ok(Alignment {
            delay_samples: 0,
            aligned_far: shift(x, 0, m.len())?,
            status: AlignmentStatus::NoSignal,
            peak_to_mean: 0.0,
        });
    }
    let n = (m.len() + x.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |s: &[f64]| {
        let mut b = vec![Complex64::new(0.0, 0.0); n];
        for (d, &v) in b.iter_mut().zip(s) {
            d.re = v;
        }
        b
    };
    let mut mf = load(m);
    let mut xf = load(x);
    fwd.process(&mut mf);
    fwd.process(&mut xf);
    let mut cross: Vec<Complex64> = mf.iter().zip(&xf).map(|(a, b)| a * b.conj()).collect();
    let strongest = cross.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let floor = PHAT_FLOOR.max(PHAT_REL_FLOOR * strongest);
    cross.iter_mut().for_each(|c| *c /= c.norm().max(floor));
    inv.process(&mut cross);
    // r[τ] peaks where mic(n) ≈ far(n - τ)
    let r: Vec<f64> = cross.iter().map(|c| c.re / n as f64).collect();

    let max_lag = ((max_delay_s * mic.sample_rate() as f64).round() as usize).min(m.len().saturating_sub(1));
    let window = &r[..=max_lag];
    let (delay, peak) = window
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let mean_abs = window.iter().map(|v| v.abs()).sum::<f64>() / window.len() as f64;
    let peak_to_mean = if mean_abs > 0.0 { peak / mean_abs } else { f64::INFINITY };
    let global_peak = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let status = if peak_to_mean < MIN_PEAK_TO_MEAN || global_peak > peak {
        AlignmentStatus::LowConfidence
    } else {
        AlignmentStatus::Confident
    };
    Ok(Alignment {
        delay_samples: delay,
        aligned_far: shift(x, delay, m.len())?,
        status,
        peak_to_mean,
    })
}

fn shift(x: &[f64], delay: usize, len: usize) -> Result<Waveform> {
    let out = (0..len)
        .map(|i| if i >= delay { x.get(i - delay).copied().unwrap_or(0.0) } else { 0.0 })
        .collect();
    Waveform::new(out)
}
