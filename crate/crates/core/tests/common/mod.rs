#![allow(dead_code)]

use cmnet::model::{forward_planes, Graph, Mode, ModelConfig, ModelOutput, ParameterStore};
use cmnet::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_planes(frames: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[4, frames, 257], -1.0, 1.0, &mut rng(seed))
}

/// Runs the network on `input` and returns the mask tensor and the tape.
pub fn run(store: &ParameterStore, cfg: &ModelConfig, input: &Tensor, mode: Mode) -> (Tape, ModelOutput) {
    let mut tape = Tape::new();
    let out = {
        let mut g = Graph::new(&mut tape, store, mode);
        let x = g.tape.constant(input.clone());
        forward_planes(&mut g, cfg, x).unwrap()
    };
    (tape, out)
}

pub fn mask_of(store: &ParameterStore, cfg: &ModelConfig, input: &Tensor, mode: Mode) -> Tensor {
    let (tape, out) = run(store, cfg, input, mode);
    tape.value(out.mask).clone()
}

/// Replaces frames `> cut` of a `[C, T, F]` tensor with fresh noise.
pub fn perturb_future(x: &Tensor, cut: usize, seed: u64) -> Tensor {
    let [c, t, f] = *x.shape() else { panic!("expected [C, T, F]") };
    let noise = Tensor::uniform(x.shape(), -5.0, 5.0, &mut rng(seed));
    let mut y = x.clone();
    for ch in 0..c {
        for tt in cut + 1..t {
            for ff in 0..f {
                let k = (ch * t + tt) * f + ff;
                y.data_mut()[k] = noise.data()[k];
            }
        }
    }
    y
}

/// Largest change over frames `0..=cut`.
pub fn max_diff_upto(a: &Tensor, b: &Tensor, cut: usize) -> f64 {
    let [c, t, f] = *a.shape() else { panic!("expected [C, T, F]") };
    let mut worst = 0.0f64;
    for ch in 0..c {
        for tt in 0..=cut.min(t - 1) {
            for ff in 0..f {
                let k = (ch * t + tt) * f + ff;
                worst = worst.max((a.data()[k] - b.data()[k]).abs());
            }
        }
    }
    worst
}
