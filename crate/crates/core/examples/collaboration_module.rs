//! The collaboration module on a random bottleneck: complementary masks,
//! the two feature catchers and the per-frame selection weights.

use cmnet::cm::cm_forward;
use cmnet::model::{init_parameters, Graph, Mode, ModelConfig};
use cmnet::tensor::{Tape, Tensor};
use rand::SeedableRng;

fn main() -> cmnet::Result<()> {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let f_in = Tensor::uniform(&[cfg.bottleneck_channels(), 6, cfg.bottleneck_bins()?], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    let x = g.tape.constant(f_in);
    let (out, trace) = cm_forward(&mut g, &cfg, x)?;
    let (m_tp, m_tn) = (tape.value(trace.m_tp.unwrap()), tape.value(trace.m_tn.unwrap()));
    let worst = m_tp.data().iter().zip(m_tn.data()).map(|(a, b)| (a + b - 1.0).abs()).fold(0.0, f64::max);
    println!("output {:?}, {} feature catchers", tape.shape(out), trace.fc_invocations);
    println!("max |M_tp + M_tn - 1| = {worst:e}");
    let (w_tp, w_tn) = (tape.value(trace.w_tp.unwrap()), tape.value(trace.w_tn.unwrap()));
    for (t, (a, b)) in w_tp.data().iter().zip(w_tn.data()).enumerate() {
        println!("frame {t}: w_tp {a:.6}  w_tn {b:.6}");
    }
    Ok(())
}
