//! STFT analysis and overlap-add synthesis of a pseudo-speech signal.

use cmnet::data::synth_speechlike;
use cmnet::signal::{istft, stft, StftConfig};

fn main() -> cmnet::Result<()> {
    let cfg = StftConfig::default();
    let x = synth_speechlike(2.0, 3)?;
    let spec = stft(&x, cfg)?;
    println!(
        "{} samples -> {} frames x {} bins (window {}, hop {})",
        x.len(),
        spec.frames,
        spec.bins,
        cfg.window_length,
        cfg.hop
    );
    let y = istft(&spec)?;
    let err = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("round trip: {} samples, max abs error {err:.2e}", y.len());
    Ok(())
}
