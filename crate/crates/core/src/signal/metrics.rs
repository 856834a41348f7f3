use super::Waveform;
use crate::error::{Error, Result};

pub const SI_SNR_EPS: f64 = 1e-8;
pub const SI_SNR_CAP_DB: f64 = 60.0;
pub const ERLE_EPS: f64 = 1e-10;
pub const ERLE_CAP_DB: f64 = 100.0;
/// Samples quieter than this fraction of the peak are excluded from level
/// measurements.
pub const ACTIVE_THRESHOLD: f64 = 1e-4;

/// Scale-invariant SNR in dB, without mean removal, capped at
/// [`SI_SNR_CAP_DB`].
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Contract(format!(
            "SI-SNR operands differ in length: {} vs {}",
            est.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::Contract("SI-SNR reference is all zeros".into()));
    }
    let alpha = est.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / ref_energy;
    let (mut target, mut noise) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        noise += (e - t) * (e - t);
    }
    let db = 10.0 * (target.max(SI_SNR_EPS) / noise.max(SI_SNR_EPS)).log10();
    Ok(db.min(SI_SNR_CAP_DB))
}

/// Echo return loss enhancement `10 log10(Σ mic² / Σ est²)` in dB, capped
/// at [`ERLE_CAP_DB`].
pub fn erle(mic: &[f64], est: &[f64]) -> Result<f64> {
    if mic.len() != est.len() {
        return Err(Error::Contract(format!(
            "ERLE operands differ in length: {} vs {}",
            mic.len(),
            est.len()
        )));
    }
    let num: f64 = mic.iter().map(|v| v * v).sum();
    let den = est.iter().map(|v| v * v).sum::<f64>().max(ERLE_EPS);
    Ok((10.0 * (num / den).log10()).min(ERLE_CAP_DB))
}

/// Mean power over samples louder than [`ACTIVE_THRESHOLD`] of the peak.
pub fn active_power(x: &[f64]) -> f64 {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let gate = ACTIVE_THRESHOLD * peak;
    let (sum, count) = x
        .iter()
        .filter(|v| v.abs() > gate)
        .fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    sum / count as f64
}

/// Level ratio measured on active samples: `10 log10(P_reference / P_signal)`.
pub fn level_ratio_db(reference: &[f64], signal: &[f64]) -> f64 {
    10.0 * (active_power(reference) / active_power(signal)).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioKind {
    /// Near-end speech relative to echo.
    Ser,
    /// Reference relative to noise.
    Snr,
}

/// Scales `signal` so that `10 log10(P_reference / P_signal) = target_db`.
pub fn scale_to_ratio(signal: &Waveform, reference: &Waveform, target_db: f64, kind: RatioKind) -> Result<Waveform> {
    let ps = active_power(signal.samples());
    let pr = active_power(reference.samples());
    if ps == 0.0 || pr == 0.0 {
        return Err(Error::Contract(format!("{kind:?} scaling needs non-silent inputs")));
    }
    let gain = (pr / (ps * 10f64.powf(target_db / 10.0))).sqrt();
    Waveform::with_rate(signal.samples().iter().map(|v| v * gain).collect(), signal.sample_rate())
}
