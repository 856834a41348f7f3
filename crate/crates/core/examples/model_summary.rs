//! Parameter counts per block and per ablation case with the resolved
//! sizing choices, and the stage shapes
//! of one forward pass.

use cmnet::model::{forward_planes, init_parameters, param_report, Graph, Mode, ModelConfig};
use cmnet::tensor::{Tape, Tensor};

fn main() -> cmnet::Result<()> {
    print!("{}", param_report(&ModelConfig::full())?.to_text());

    let toy = ModelConfig::toy();
    let store = init_parameters(&toy)?;
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    let x = g.tape.constant(Tensor::zeros(&[4, 20, 257]));
    let out = forward_planes(&mut g, &toy, x)?;
    for (name, shape) in &out.trace.stages {
        println!("{name:<6} {shape:?}");
    }
    Ok(())
}
