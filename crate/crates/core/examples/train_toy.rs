//! Overfits the toy network to one double-talk scenario.

use cmnet::data::{ScenarioDistribution, ScenarioKind};
use cmnet::model::ModelConfig;
use cmnet::train::{Trainer, TrainConfig};

fn main() -> cmnet::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let config = TrainConfig {
        chunk_seconds: 1.0,
        steps,
        scenarios: ScenarioDistribution {
            kinds: vec![ScenarioKind::DoubleTalk],
            fixed_seed: Some(42),
            ..ScenarioDistribution::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&ModelConfig::toy(), &config)?;
    let records = trainer.run(None, |r| {
        if r.step % 10 == 0 {
            println!("step {:>4}  SI-SNR {:>7.2} dB  grad norm {:.3}", r.step, -r.loss, r.grad_norm);
        }
    })?;
    let (first, last) = (records[0].loss, records.last().unwrap().loss);
    println!("SI-SNR {:.2} dB -> {:.2} dB after {steps} steps", -first, -last);
    Ok(())
}
