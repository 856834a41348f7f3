mod common;

use cmnet::model::{
    cmnet_forward, encoder_forward, gated_block_forward, init_parameters, load_checkpoint, load_checkpoint_for,
    param_count, AblationCase, Graph, Mode, ModelConfig, ParameterStore, Role, Toggles,
};
use cmnet::signal::{ComplexSpectrogram, StftConfig};
use cmnet::tensor::{Tape, Tensor, BN_EPS};
use cmnet::Error;
use common::*;
use proptest::prelude::*;

// ── configuration ───────────────────────────────────────────────────────

#[test]
fn default_configs_validate() {
    ModelConfig::full().validate().unwrap();
    ModelConfig::toy().validate().unwrap();
    assert_eq!(ModelConfig::full().frequency_chain().unwrap(), [257, 257, 129, 65]);
    assert_eq!(ModelConfig::toy().frequency_chain().unwrap(), [257, 257, 129, 65]);
}

#[test]
fn cases_map_to_toggles() {
    let t = |c: AblationCase| c.toggles();
    assert_eq!(t(AblationCase::Case1), Toggles { tpb: true, tnb: true, ib: true });
    assert_eq!(t(AblationCase::Case2), Toggles { tpb: true, tnb: false, ib: false });
    assert_eq!(t(AblationCase::Case3), Toggles { tpb: false, tnb: true, ib: false });
    assert_eq!(t(AblationCase::Case4), Toggles { tpb: true, tnb: true, ib: false });
    assert!(t(AblationCase::Case5).is_substitute());
    for i in 1..=5 {
        assert_eq!(AblationCase::from_index(i).unwrap().index(), i);
    }
    assert!(matches!(AblationCase::from_index(6), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::toy();
    cfg.toggles = Toggles { tpb: true, tnb: false, ib: true };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(matches!(init_parameters(&cfg), Err(Error::Config(_))));

    let mut cfg = ModelConfig::toy();
    cfg.decoder_strides = [(1, 1), (1, 2), (1, 1)];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = ModelConfig::toy();
    cfg.cm_conv_stride = (1, 2);
    assert!(cfg.validate().is_err());
}

#[test]
fn config_toml_round_trip() {
    let cfg = ModelConfig::full().with_case(AblationCase::Case3).with_seed(9);
    let back = ModelConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let bad = cfg.to_toml().replace("attention_dim", "attn");
    assert!(matches!(ModelConfig::from_toml(&bad), Err(Error::Config(_))));
    let short = cfg.to_toml().replace("encoder_channels = [16, 32, 64]", "encoder_channels = [16, 32]");
    assert!(ModelConfig::from_toml(&short).is_err());
}

// ── parameter accounting ────────────────────────────────────────────────

#[test]
fn parameter_counts() {
    let store = init_parameters(&ModelConfig::full()).unwrap();
    assert_eq!(store.get("enc1.conv.w").unwrap().len(), 16 * 4 * 3 * 5);
    assert_eq!(store.get("enc1.conv.b").unwrap().len(), 16);
    let total = param_count(&store);
    assert!((1_500_000..=3_500_000).contains(&total), "{total}");
    assert_eq!(store.breakdown().values().sum::<usize>(), total);
    assert_eq!(param_count(&ParameterStore::new()), 0);

    let case5 = param_count(&init_parameters(&ModelConfig::full().with_case(AblationCase::Case5)).unwrap());
    let rel = (case5 as f64 - total as f64).abs() / total as f64;
    assert!(rel <= 0.15, "case 5 differs by {rel}");
}

#[test]
fn parameter_names_are_unique_and_f32_exact() {
    let store = init_parameters(&ModelConfig::toy()).unwrap();
    let mut names: Vec<&str> = store.names().collect();
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n);
    for e in store.entries() {
        assert!(e.tensor.data().iter().all(|&v| v == v as f32 as f64), "{}", e.name);
    }
    assert!(store.entries().iter().any(|e| e.role == Role::Buffer));
    let mut dup = store.clone();
    assert!(dup.insert("enc1.conv.w", Tensor::zeros(&[1]), Role::Trainable).is_err());
}

#[test]
fn initialisation_is_seeded() {
    let a = init_parameters(&ModelConfig::toy().with_seed(3)).unwrap();
    let b = init_parameters(&ModelConfig::toy().with_seed(3)).unwrap();
    let c = init_parameters(&ModelConfig::toy().with_seed(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.fingerprint(), c.fingerprint());
    assert_eq!(a.get("enc2.prelu.alpha").unwrap().data()[0], 0.25);
    assert_eq!(a.get("enc2.bn.gamma").unwrap().data()[0], 1.0);
    assert_eq!(a.get("dec1.deconv.b").unwrap().max_abs(), 0.0);
}

// ── encoder and decoder geometry ────────────────────────────────────────

#[test]
fn encoder_shapes_and_skips() {
    let cfg = ModelConfig::full();
    let store = init_parameters(&cfg).unwrap();
    for t in [1, 4] {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, Mode::Infer);
        let x = g.tape.constant(random_planes(t, 1));
        let enc = encoder_forward(&mut g, &cfg, x).unwrap();
        assert_eq!(tape.shape(enc.bottleneck), [64, t, 65]);
        assert_eq!(tape.shape(enc.skips[0]), [4, t, 257]);
        assert_eq!(tape.shape(enc.skips[1]), [16, t, 257]);
        assert_eq!(tape.shape(enc.skips[2]), [32, t, 129]);
    }
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    let bad = g.tape.constant(Tensor::zeros(&[3, 2, 257]));
    assert!(matches!(encoder_forward(&mut g, &cfg, bad), Err(Error::Shape(_))));
}

#[test]
fn zero_input_gives_constant_bottleneck() {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    let x = g.tape.constant(Tensor::zeros(&[4, 5, 257]));
    let enc = encoder_forward(&mut g, &cfg, x).unwrap();
    let b = tape.value(enc.bottleneck);
    let per = 5 * 65;
    for ch in 0..16 {
        let block = &b.data()[ch * per..(ch + 1) * per];
        assert!(block.iter().all(|&v| v == block[0]));
    }
}

#[test]
fn full_shape_trace() {
    let cfg = ModelConfig::full();
    let store = init_parameters(&cfg).unwrap();
    let (_, out) = run(&store, &cfg, &random_planes(3, 2), Mode::Infer);
    let stages: Vec<(&str, Vec<usize>)> = out.trace.stages.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    let expect = [
        ("input", vec![4, 3, 257]),
        ("enc1", vec![16, 3, 257]),
        ("enc2", vec![32, 3, 129]),
        ("enc3", vec![64, 3, 65]),
        ("cm", vec![64, 3, 65]),
        ("dec1", vec![32, 3, 129]),
        ("dec2", vec![16, 3, 257]),
        ("dec3", vec![2, 3, 257]),
        ("mask", vec![2, 3, 257]),
    ];
    for (got, want) in stages.iter().zip(expect.iter()) {
        assert_eq!(got.0, want.0);
        assert_eq!(got.1, want.1);
    }
    assert_eq!(stages.len(), expect.len());
}

#[test]
fn decoder_restores_every_length() {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg).unwrap();
    for t in 1..=50 {
        let m = mask_of(&store, &cfg, &random_planes(t, t as u64), Mode::Infer);
        assert_eq!(m.shape(), [2, t, 257]);
    }
}

#[test]
fn gates_lie_in_open_unit_interval() {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg).unwrap();
    let (tape, out) = run(&store, &cfg, &random_planes(6, 3), Mode::Train);
    assert_eq!(out.trace.gates.len(), 3);
    for &g in &out.trace.gates {
        assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

// ── gated block with constructed weights ────────────────────────────────

fn deep_and_skip(store: &ParameterStore, cfg: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
    let _ = (store, cfg);
    let mut r = rng(seed);
    (
        Tensor::uniform(&[16, 4, 65], -1.0, 1.0, &mut r),
        Tensor::uniform(&[8, 4, 129], -1.0, 1.0, &mut r),
    )
}

fn block_out(store: &ParameterStore, cfg: &ModelConfig, deep: &Tensor, skip: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store, Mode::Infer);
    let d = g.tape.constant(deep.clone());
    let s = g.tape.constant(skip.clone());
    let out = gated_block_forward(&mut g, cfg, 0, d, s).unwrap();
    tape.value(out).clone()
}

#[test]
fn closed_gate_ignores_skip() {
    let cfg = ModelConfig::toy();
    let mut store = init_parameters(&cfg).unwrap();
    store.get_mut("dec1.gate.conv.b").unwrap().data_mut().fill(-1e9);
    let (deep, skip) = deep_and_skip(&store, &cfg, 5);
    let other = Tensor::uniform(skip.shape(), -3.0, 3.0, &mut rng(6));
    let a = block_out(&store, &cfg, &deep, &skip);
    let b = block_out(&store, &cfg, &deep, &other);
    assert_eq!(a, b);
    assert_eq!(a.shape(), [8, 4, 129]);
}

#[test]
fn open_gate_passes_skip_through() {
    let cfg = ModelConfig::toy();
    let mut store = init_parameters(&cfg).unwrap();
    store.get_mut("dec1.gate.conv.b").unwrap().data_mut().fill(1e9);
    // fuse conv: identity on the skip half, zero on the deconv half
    let w = store.get_mut("dec1.fuse.conv.w").unwrap();
    let [co, ci, _, _] = *w.shape() else { unreachable!() };
    assert_eq!((co, ci), (8, 16));
    w.data_mut().fill(0.0);
    for c in 0..8 {
        w.data_mut()[c * ci + c] = 1.0;
    }
    let (deep, skip) = deep_and_skip(&store, &cfg, 7);
    let out = block_out(&store, &cfg, &deep, &skip);
    let scale = 1.0 / (1.0 + BN_EPS).sqrt();
    let oracle = skip.map(|v| {
        let z = v * scale;
        if z > 0.0 {
            z
        } else {
            0.25 * z
        }
    });
    assert!(out.max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn mismatched_skip_is_a_shape_error() {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    let d = g.tape.constant(Tensor::zeros(&[16, 4, 65]));
    let s = g.tape.constant(Tensor::zeros(&[8, 5, 129]));
    assert!(matches!(gated_block_forward(&mut g, &cfg, 0, d, s), Err(Error::Shape(_))));
}

// ── end-to-end contract ─────────────────────────────────────────────────

#[test]
fn zero_parameters_give_zero_mask() {
    let cfg = ModelConfig::toy();
    let mut store = init_parameters(&cfg).unwrap();
    for e in store.entries_mut() {
        if e.role == Role::Trainable {
            e.tensor.data_mut().fill(0.0);
        }
    }
    let m = mask_of(&store, &cfg, &random_planes(4, 8), Mode::Infer);
    assert_eq!(m.max_abs(), 0.0);
}

#[test]
fn spectrogram_shape_mismatch_is_a_contract_error() {
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg).unwrap();
    let a = ComplexSpectrogram::zeros(4, StftConfig::default(), 1024);
    let b = ComplexSpectrogram::zeros(5, StftConfig::default(), 1280);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, Mode::Infer);
    assert!(matches!(cmnet_forward(&mut g, &cfg, &a, &b), Err(Error::Contract(_))));
}

#[test]
fn forward_is_deterministic() {
    for case in [AblationCase::Case1, AblationCase::Case5] {
        let cfg = ModelConfig::toy().with_case(case);
        let store = init_parameters(&cfg).unwrap();
        let x = random_planes(7, 9);
        for mode in [Mode::Train, Mode::Infer] {
            let a = mask_of(&store, &cfg, &x, mode);
            let b = mask_of(&store, &cfg, &x, mode);
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

#[test]
fn inference_is_causal() {
    for case in AblationCase::ALL {
        let cfg = ModelConfig::toy().with_case(case);
        let store = init_parameters(&cfg).unwrap();
        let x = random_planes(12, 10);
        let base = mask_of(&store, &cfg, &x, Mode::Infer);
        for (k, cut) in [0usize, 5, 10].into_iter().enumerate() {
            let y = perturb_future(&x, cut, 100 + k as u64);
            let other = mask_of(&store, &cfg, &y, Mode::Infer);
            assert!(max_diff_upto(&base, &other, cut) < 1e-6, "{case} cut {cut}");
            assert!(max_diff_upto(&base, &other, 11) > 1e-6, "perturbation had no effect");
        }
    }
}

#[test]
fn running_statistics_change_inference() {
    let cfg = ModelConfig::toy();
    let mut store = init_parameters(&cfg).unwrap();
    let x = random_planes(4, 11);
    let a = mask_of(&store, &cfg, &x, Mode::Infer);
    store.get_mut("enc2.bn.var").unwrap().data_mut().fill(4.0);
    let b = mask_of(&store, &cfg, &x, Mode::Infer);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

// ── checkpoints ─────────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy().with_seed(12);
    let mut store = init_parameters(&cfg).unwrap();
    store.get_mut("enc2.bn.mean").unwrap().data_mut()[0] = 0.375;
    store.save_checkpoint(&cfg, dir.path()).unwrap();
    let (cfg2, back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(back, store);
    let x = random_planes(5, 13);
    let a = mask_of(&store, &cfg, &x, Mode::Infer);
    let b = mask_of(&back, &cfg2, &x, Mode::Infer);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l.starts_with("enc1.conv.w\t4x4x3x5\tf32\t0\tparam")));
}

#[test]
fn checkpoint_mismatches_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy();
    init_parameters(&cfg).unwrap().save_checkpoint(&cfg, dir.path()).unwrap();
    let other = ModelConfig::toy().with_case(AblationCase::Case5);
    assert!(matches!(load_checkpoint_for(dir.path(), &other), Err(Error::Checkpoint(_))));
    load_checkpoint_for(dir.path(), &cfg).unwrap();

    // tensors that do not match the stored architecture
    let full = ModelConfig::full();
    std::fs::write(dir.path().join("model.toml"), full.to_toml()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));

    // truncated blob
    let dir2 = tempfile::tempdir().unwrap();
    init_parameters(&cfg).unwrap().save_checkpoint(&cfg, dir2.path()).unwrap();
    let blob = dir2.path().join("params.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(dir2.path()), Err(Error::Checkpoint(_))));

    assert!(matches!(load_checkpoint(dir.path().join("absent")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn causal_for_random_cuts(t in 2usize..10, cut_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let cfg = ModelConfig::toy();
        let store = init_parameters(&cfg).unwrap();
        let cut = ((t - 1) as f64 * cut_frac) as usize;
        let x = random_planes(t, seed);
        let y = perturb_future(&x, cut, seed + 1);
        let a = mask_of(&store, &cfg, &x, Mode::Infer);
        let b = mask_of(&store, &cfg, &y, Mode::Infer);
        prop_assert!(max_diff_upto(&a, &b, cut) < 1e-6);
    }
}
