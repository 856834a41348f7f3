//! A miniature ablation table over the five module configurations.

use cmnet::model::{AblationCase, ModelConfig};
use cmnet::train::{ablation_run, standard_eval_set, TrainConfig};

fn main() -> cmnet::Result<()> {
    let train = TrainConfig {
        chunk_seconds: 1.0,
        steps: 5,
        ..TrainConfig::default()
    };
    let specs = standard_eval_set(1000, 1, 1.0);
    let report = ablation_run(&ModelConfig::toy(), &train, &specs, &AblationCase::ALL, |row| {
        println!("{} trained ({} parameters)", row.case, row.param_count);
    })?;
    print!("{}", report.to_text());
    println!("digest {}", report.digest());
    Ok(())
}
