//! Finite-difference check of every layer type and of the toy model under
//! all five ablation cases.

use cmnet::model::{AblationCase, ModelConfig};
use cmnet::verify::run_gradcheck;

fn main() -> cmnet::Result<()> {
    let start = std::time::Instant::now();
    let suite = run_gradcheck(&ModelConfig::toy(), &AblationCase::ALL, 7, 1e-6)?;
    print!("{}", suite.to_text());
    println!(
        "{} blocks, {} failing, {:.1} s",
        suite.blocks.len(),
        suite.failures().count(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
