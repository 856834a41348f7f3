//! ERLE and SI-SNR on constructed signals.

use cmnet::data::synth_speechlike;
use cmnet::signal::{erle, si_snr};

fn main() -> cmnet::Result<()> {
    let s = synth_speechlike(1.0, 1)?;
    let residual: Vec<f64> = s.samples().iter().map(|v| v / 10.0).collect();
    println!("ERLE for a 100x energy reduction: {:.6} dB", erle(s.samples(), &residual)?);

    let noisy: Vec<f64> = s.samples().iter().enumerate().map(|(i, v)| v + 0.01 * ((i * 7) % 13) as f64 / 13.0).collect();
    let scaled: Vec<f64> = noisy.iter().map(|v| 3.7 * v).collect();
    println!("SI-SNR of a noisy copy:     {:.4} dB", si_snr(&noisy, s.samples())?);
    println!("SI-SNR after scaling by 3.7: {:.4} dB", si_snr(&scaled, s.samples())?);
    println!("SI-SNR of the reference:     {:.1} dB (cap)", si_snr(s.samples(), s.samples())?);
    Ok(())
}
