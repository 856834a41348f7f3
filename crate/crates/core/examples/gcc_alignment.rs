//! Delay estimation between a far-end reference and the microphone with
//! GCC-PHAT, on a synthetic echo path.

use cmnet::data::{mix_scenario, EchoPath, ScenarioSpec};
use cmnet::signal::{gcc_phat_align, Waveform, DEFAULT_MAX_DELAY_S};

fn main() -> cmnet::Result<()> {
    // broadband pair: exact recovery
    let x: Vec<f64> = (0..16_000).map(|i| ((i as f64 * 12.9898).sin() * 43_758.545).fract() - 0.5).collect();
    for delay in [0usize, 37, 1234, 7999] {
        let mut y = vec![0.0; delay];
        y.extend_from_slice(&x[..x.len() - delay]);
        let a = gcc_phat_align(&Waveform::new(y)?, &Waveform::new(x.clone())?, DEFAULT_MAX_DELAY_S)?;
        println!("true delay {delay:>5} -> estimated {:>5} ({:?})", a.delay_samples, a.status);
    }
    // far-end-only scenario through a decaying impulse response
    let echo = EchoPath {
        bulk_delay: 480,
        ..EchoPath::default()
    };
    let m = mix_scenario(&ScenarioSpec::far_end(2.0, 5).with_echo(echo))?;
    let a = m.align()?;
    println!("echo path bulk delay 480 -> estimated {} (peak/mean {:.1})", a.delay_samples, a.peak_to_mean);
    Ok(())
}
