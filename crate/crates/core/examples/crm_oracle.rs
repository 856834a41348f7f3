//! Ideal complex ratio mask: computed from the microphone and near-end
//! spectrograms, applied back, and scored against the near end.

use cmnet::data::{mix_scenario, ScenarioSpec};
use cmnet::signal::{crm_apply, crm_compute, istft, si_snr, stft, StftConfig};

fn main() -> cmnet::Result<()> {
    let m = mix_scenario(&ScenarioSpec::double_talk(-5.0, 2.0, 11))?;
    let cfg = StftConfig::default();
    let (y, s) = (stft(&m.y, cfg)?, stft(&m.s, cfg)?);
    let mask = crm_compute(&y, &s)?;
    let est = istft(&crm_apply(&y, &mask)?)?;
    let mag = mask.magnitude();
    let mean = mag.iter().sum::<f64>() / mag.len() as f64;
    println!("mask {} x {}, mean magnitude {mean:.3}", mask.frames, mask.bins);
    println!("SI-SNR microphone: {:>7.2} dB", si_snr(m.y.samples(), m.s.samples())?);
    println!("SI-SNR oracle CRM: {:>7.2} dB", si_snr(est.samples(), m.s.samples())?);
    Ok(())
}
