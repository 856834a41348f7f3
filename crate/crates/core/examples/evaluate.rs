//! Scores an untrained toy model, the unprocessed microphone and the
//! oracle mask on a small generated evaluation set.

use cmnet::model::{init_parameters, ModelConfig};
use cmnet::train::{evaluate_specs, standard_eval_set};

fn main() -> cmnet::Result<()> {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg)?;
    let specs = standard_eval_set(1000, 2, 2.0);
    let report = evaluate_specs(&store, &cfg, &specs, true)?;
    print!("{}", report.to_text());
    Ok(())
}
