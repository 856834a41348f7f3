use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{EchoPath, Nonlinearity, NoiseKind};
use crate::error::{Error, Result};
use crate::signal::{Waveform, SAMPLE_RATE};

pub const SPEECH_PEAK: f64 = 0.5;
pub const MIN_SPEECH_S: f64 = 0.5;
/// Clip level of [`Nonlinearity::HardClip`] as a fraction of the input peak.
pub const CLIP_FRACTION: f64 = 0.6;
/// Peak amplitude of the impulse-response tail relative to the direct path.
pub const RIR_TAIL_GAIN: f64 = 0.05;

/// Deterministic pseudo-speech: 3 to 5 harmonics of a random 80-300 Hz
/// fundamental, shaped into 2-8 Hz syllables separated by exact silences,
/// peak-normalised to [`SPEECH_PEAK`].
pub fn synth_speechlike(duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s >= MIN_SPEECH_S) || !duration_s.is_finite() {
        return Err(Error::Config(format!(
            "pseudo-speech needs at least {MIN_SPEECH_S} s, got {duration_s}"
        )));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.gen_range(80.0..300.0);
    let harmonics = rng.gen_range(3..=5usize);
    let amps: Vec<f64> = (1..=harmonics).map(|k| rng.gen_range(0.5..1.0) / k as f64).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut out = vec![0.0; n];
    let mut pos = (rng.gen_range(0.02..0.1) * sr) as usize;
    // Phase accumulator keeps harmonics continuous across pitch changes.
    let mut theta = 0.0;
    while pos < n {
        let rate = rng.gen_range(2.0..8.0);
        let len = ((sr / rate) as usize).min(n - pos);
        let pitch = f0 * rng.gen_range(0.9..1.1);
        let glide = rng.gen_range(-0.1..0.1);
        let loud = rng.gen_range(0.4..1.0);
        for i in 0..len {
            let u = i as f64 / len as f64;
            let env = (PI * u).sin().powi(2) * loud;
            theta += 2.0 * PI * pitch * (1.0 + glide * u) / sr;
            let voiced: f64 = amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(k, (a, p))| a * ((k + 1) as f64 * theta + p).sin())
                .sum();
            out[pos + i] = env * voiced;
        }
        pos += len + (rng.gen_range(0.05..0.25) * sr) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = SPEECH_PEAK / peak;
        out.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(out)
}

/// Seeded noise of `len` samples with unit peak.
pub fn synth_noise(len: usize, kind: NoiseKind, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    if kind == NoiseKind::LowPass {
        let mut state = 0.0;
        for v in out.iter_mut() {
            state = 0.9 * state + 0.1 * *v;
            *v = state;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    Waveform::new(out)
}

/// Exponentially decaying white-noise impulse response. Tap 0 of the
/// decaying part is `1`; every later tap is below [`RIR_TAIL_GAIN`] in
/// magnitude.
/// `bulk_delay` zeros precede it.
pub fn room_impulse_response(path: &EchoPath, seed: u64) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let taps = ((path.rir_length_s * sr).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = vec![0.0; path.bulk_delay + taps];
    h[path.bulk_delay] = 1.0;
    for k in 1..taps {
        h[path.bulk_delay + k] = RIR_TAIL_GAIN * rng.gen_range(-1.0..1.0) * (-path.decay_rate * k as f64 / sr).exp();
    }
    h
}

/// Memoryless nonlinearity relative to the peak of `x`.
pub fn apply_nonlinearity(x: &[f64], kind: Nonlinearity) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let c = CLIP_FRACTION * peak;
    match kind {
        Nonlinearity::None => x.to_vec(),
        Nonlinearity::HardClip => x.iter().map(|v| v.clamp(-c, c)).collect(),
        Nonlinearity::Arctan if c > 0.0 => x.iter().map(|v| c * (v / c).atan()).collect(),
        Nonlinearity::Arctan => x.to_vec(),
    }
}

/// `h ⊛ x` truncated to `len(x)`.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 || k >= x.len() {
            continue;
        }
        for (o, &xv) in out[k..].iter_mut().zip(x) {
            *o += hk * xv;
        }
    }
    out
}

/// Echo `d = h ⊛ g(x)` for a given impulse response.
pub fn echo_with_rir(x: &Waveform, h: &[f64], kind: Nonlinearity) -> Result<Waveform> {
    let g = apply_nonlinearity(x.samples(), kind);
    Waveform::with_rate(convolve_truncated(&g, h), x.sample_rate())
}

/// Echo of the far-end signal through the seeded path of `path`.
pub fn synth_echo(x: &Waveform, path: &EchoPath, seed: u64) -> Result<Waveform> {
    if x.samples().iter().all(|&v| v == 0.0) {
        return Err(Error::Contract("echo synthesis needs a non-silent far-end signal".into()));
    }
    echo_with_rir(x, &room_impulse_response(path, seed), path.nonlinearity)
}
