//! Double-talk and single-talk mixtures with controlled SER and SNR,
//! written as WAV files.

use cmnet::data::{mix_scenario, Nonlinearity, NoiseKind, ScenarioSpec, EchoPath};
use cmnet::signal::{level_ratio_db, write_wav};

fn main() -> cmnet::Result<()> {
    let dir = std::env::temp_dir().join("cmnet_synth_example");
    std::fs::create_dir_all(&dir).expect("temporary directory");
    let specs = [
        ScenarioSpec::double_talk(-5.0, 2.0, 1).with_snr(Some(5.0), NoiseKind::White),
        ScenarioSpec::near_end(2.0, 2).with_snr(Some(5.0), NoiseKind::LowPass),
        ScenarioSpec::far_end(2.0, 3).with_echo(EchoPath {
            nonlinearity: Nonlinearity::HardClip,
            ..EchoPath::default()
        }),
    ];
    for spec in &specs {
        let m = mix_scenario(spec)?;
        let label = spec.kind.label();
        if spec.kind.has_near_end() && spec.kind.has_echo() {
            println!("{label}: SER {:.2} dB", level_ratio_db(m.s.samples(), m.d.samples()));
        }
        println!("{label}: mic energy {:.3}, echo energy {:.3}, noise energy {:.3}", m.y.energy(), m.d.energy(), m.v.energy());
        write_wav(dir.join(format!("{label}_mic.wav")), &m.y)?;
        write_wav(dir.join(format!("{label}_far.wav")), &m.x)?;
    }
    println!("wrote WAV files to {}", dir.display());
    Ok(())
}
