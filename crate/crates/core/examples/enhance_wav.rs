//! Checkpoint round trip and the file-to-file enhancement pipeline.

use cmnet::data::{mix_scenario, ScenarioSpec};
use cmnet::model::{init_parameters, load_checkpoint, ModelConfig};
use cmnet::signal::{read_wav, write_wav};
use cmnet::train::enhance;

fn main() -> cmnet::Result<()> {
    let dir = std::env::temp_dir().join("cmnet_enhance_example");
    let cfg = ModelConfig::toy();
    init_parameters(&cfg)?.save_checkpoint(&cfg, dir.join("checkpoint"))?;
    let (cfg, store) = load_checkpoint(dir.join("checkpoint"))?;

    let m = mix_scenario(&ScenarioSpec::double_talk(0.0, 3.0, 8))?;
    write_wav(dir.join("mic.wav"), &m.y)?;
    write_wav(dir.join("far.wav"), &m.x)?;
    let (mic, far) = (read_wav(dir.join("mic.wav"))?, read_wav(dir.join("far.wav"))?);

    let start = std::time::Instant::now();
    let e = enhance(&store, &cfg, &mic, &far)?;
    let rtf = start.elapsed().as_secs_f64() / mic.duration_s();
    write_wav(dir.join("enhanced.wav"), &e.output)?;
    println!(
        "delay {} samples ({:?}), real-time factor {rtf:.3}, output {} samples in {}",
        e.alignment.delay_samples,
        e.alignment.status,
        e.output.len(),
        dir.display()
    );
    Ok(())
}
