//! Inference-mode outputs up to frame t do not depend on later frames.

use cmnet::model::{forward_planes, init_parameters, AblationCase, Graph, Mode, ModelConfig};
use cmnet::tensor::{Tape, Tensor};
use rand::SeedableRng;

fn mask(cfg: &ModelConfig, input: &Tensor) -> cmnet::Result<Tensor> {
    let store = init_parameters(cfg)?;
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    let x = g.tape.constant(input.clone());
    let out = forward_planes(&mut g, cfg, x)?;
    Ok(tape.value(out.mask).clone())
}

fn main() -> cmnet::Result<()> {
    let (frames, bins, cut) = (16, 257, 9);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[4, frames, bins], -1.0, 1.0, &mut rng);
    let mut y = x.clone();
    for p in 0..4 {
        for t in cut + 1..frames {
            for f in 0..bins {
                y.data_mut()[(p * frames + t) * bins + f] += 5.0;
            }
        }
    }
    for case in [AblationCase::Case1, AblationCase::Case5] {
        let cfg = ModelConfig::toy().with_case(case);
        let (a, b) = (mask(&cfg, &x)?, mask(&cfg, &y)?);
        let diff = |range: std::ops::Range<usize>| {
            let mut m = 0.0f64;
            for p in 0..2 {
                for t in range.clone() {
                    for f in 0..bins {
                        let k = (p * frames + t) * bins + f;
                        m = m.max((a.data()[k] - b.data()[k]).abs());
                    }
                }
            }
            m
        };
        println!("{case}: max change at frames <= {cut}: {:e}; after: {:.3}", diff(0..cut + 1), diff(cut + 1..frames));
    }
    Ok(())
}
