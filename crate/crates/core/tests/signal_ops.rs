use std::f64::consts::PI;
use std::sync::Arc;

use cmnet::signal::differentiable::{apply_mask, istft_var, si_snr_var};
use cmnet::signal::{
    active_power, complex_product, crm_apply, crm_compute, erle, gcc_phat_align, istft, level_ratio_db,
    read_wav, scale_to_ratio, si_snr, stft, write_wav, write_wav_f32, AlignmentStatus, CRMask,
    ComplexSpectrogram, RatioKind, Stft, StftConfig, Waveform, CRM_CLIP,
};
use cmnet::tensor::{finite_difference_check, GradCheckOptions, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v).unwrap()
}

fn interior_rel_err(a: &[f64], b: &[f64], margin: usize) -> f64 {
    let r = margin..a.len() - margin;
    let num: f64 = a[r.clone()].iter().zip(&b[r.clone()]).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a[r].iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

// ── STFT ────────────────────────────────────────────────────────────────

#[test]
fn stft_config_defaults() {
    let cfg = StftConfig::default();
    assert_eq!((cfg.window_length, cfg.hop, cfg.fft_size, cfg.bins()), (512, 256, 512, 257));
    assert!(cfg.window().iter().all(|&w| w > 0.0));
    // periodic Hamming: w[0] = 0.08, w[N/2] = 1
    assert!((cfg.window()[0] - 0.08).abs() < 1e-12);
    assert!((cfg.window()[256] - 1.0).abs() < 1e-12);
}

/// Direct DFT of one windowed frame.
fn dft_energy_at(frame: &[f64], k: usize) -> (f64, f64) {
    let n = frame.len();
    let mut total = 0.0;
    let mut at_k = 0.0;
    for b in 0..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in frame.iter().enumerate() {
            let th = 2.0 * PI * (b * i) as f64 / n as f64;
            re += x * th.cos();
            im -= x * th.sin();
        }
        let e = re * re + im * im;
        total += e;
        if b.abs_diff(k) <= 1 {
            at_k += e;
        }
    }
    (at_k, total)
}

#[test]
fn stft_sinusoid_concentrates_at_its_bin() {
    let k = 20;
    let x: Vec<f64> = (0..4096).map(|n| 0.3 * (2.0 * PI * k as f64 * n as f64 / 512.0).sin()).collect();
    let spec = stft(&wave(x.clone()), StftConfig::default()).unwrap();
    let cfg = StftConfig::default();
    let win = cfg.window();
    // interior frame t covers samples [t*256 - 256, t*256 + 256)
    let t = 5;
    let frame: Vec<f64> = (0..512).map(|n| x[t * 256 - 256 + n] * win[n]).collect();
    let (near, total) = dft_energy_at(&frame, k);
    assert!(near / total > 0.9);
    let bins = spec.bins;
    let e: Vec<f64> = (0..bins).map(|b| spec.re[t * bins + b].powi(2) + spec.im[t * bins + b].powi(2)).collect();
    let sum: f64 = e.iter().sum();
    assert!(e[k] / sum >= 0.9 * 0.5, "main-lobe share {}", e[k] / sum);
    assert!((e[k - 1] + e[k] + e[k + 1]) / sum >= 0.9);
    let oracle_at_k = {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in frame.iter().enumerate() {
            let th = 2.0 * PI * (k * i) as f64 / 512.0;
            re += v * th.cos();
            im -= v * th.sin();
        }
        (re, im)
    };
    assert!((spec.re[t * bins + k] - oracle_at_k.0).abs() < 1e-9);
    assert!((spec.im[t * bins + k] - oracle_at_k.1).abs() < 1e-9);
}

#[test]
fn stft_zero_and_linearity() {
    let z = stft(&Waveform::zeros(2000), StftConfig::default()).unwrap();
    assert!(z.re.iter().chain(&z.im).all(|&v| v == 0.0));

    let (x, y) = (noise(3000, 1), noise(3000, 2));
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
    let sx = stft(&wave(x), StftConfig::default()).unwrap();
    let sy = stft(&wave(y), StftConfig::default()).unwrap();
    let sc = stft(&wave(combo), StftConfig::default()).unwrap();
    for k in 0..sc.re.len() {
        assert!((sc.re[k] - (a * sx.re[k] + b * sy.re[k])).abs() < 1e-9);
        assert!((sc.im[k] - (a * sx.im[k] + b * sy.im[k])).abs() < 1e-9);
    }
}

#[test]
fn stft_rejects_short_signal() {
    assert!(matches!(stft(&Waveform::zeros(100), StftConfig::default()), Err(cmnet::Error::Contract(_))));
}

#[test]
fn istft_round_trip() {
    for (len, seed) in [(16000, 3), (8000, 4), (160_000, 5), (513, 6)] {
        let x = noise(len, seed);
        let spec = stft(&wave(x.clone()), StftConfig::default()).unwrap();
        assert_eq!(spec.frames, StftConfig::default().frames_for(len));
        let back = istft(&spec).unwrap();
        assert_eq!(back.len(), len);
        if len > 1100 {
            assert!(interior_rel_err(&x, back.samples(), 512) < 1e-6);
        }
        // every sample is covered by two frames, so reconstruction is exact
        let full: f64 = x.iter().zip(back.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(full < 1e-12);
    }
    let dc = vec![0.25; 8000];
    let back = istft(&stft(&wave(dc.clone()), StftConfig::default()).unwrap()).unwrap();
    assert!(interior_rel_err(&dc, back.samples(), 512) < 1e-6);

    let zero = ComplexSpectrogram::zeros(10, StftConfig::default(), 2560);
    assert!(istft(&zero).unwrap().samples().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn round_trip_random_lengths(len in 8000usize..160_000, seed in 0u64..100) {
        let x = noise(len, seed);
        let back = istft(&stft(&wave(x.clone()), StftConfig::default()).unwrap()).unwrap();
        prop_assert!(interior_rel_err(&x, back.samples(), 512) < 1e-6);
    }
}

#[test]
fn istft_adjoint_matches_inner_products() {
    let stft = Stft::new(StftConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames = 9;
    let n = 2000;
    let mut spec = ComplexSpectrogram::zeros(frames, StftConfig::default(), n);
    for v in spec.re.iter_mut().chain(spec.im.iter_mut()) {
        *v = rng.gen_range(-1.0..1.0);
    }
    // DC/Nyquist imaginary parts are ignored by the real inverse
    for t in 0..frames {
        spec.im[t * 257] = 0.0;
        spec.im[t * 257 + 256] = 0.0;
    }
    let g = noise(n, 8);
    let x = stft.synthesize(&spec).unwrap();
    let lhs: f64 = x.samples().iter().zip(&g).map(|(a, b)| a * b).sum();
    let (gre, gim) = stft.synthesize_adjoint(&g, frames);
    let rhs: f64 = spec.re.iter().zip(&gre).chain(spec.im.iter().zip(&gim)).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() / lhs.abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn differentiable_pipeline_gradcheck() {
    // mask -> complex product -> istft -> SI-SNR, gradient wrt the real plane
    let n = 1200;
    let y = stft(&wave(noise(n, 9)), StftConfig::default()).unwrap();
    let s = noise(n, 10);
    let stft = Arc::new(Stft::new(StftConfig::default()).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m_re = Tensor::uniform(&[y.frames, y.bins], -1.0, 1.0, &mut rng);
    let m_im = Tensor::uniform(&[y.frames, y.bins], -1.0, 1.0, &mut rng);
    let indices: Vec<usize> = (0..40).map(|i| (i * 97) % m_re.len()).collect();
    let opts = GradCheckOptions { indices: Some(indices), ..GradCheckOptions::with_tol(1e-6) };
    let rep = finite_difference_check(
        |tp, re| {
            let im = tp.constant(m_im.clone());
            let (sr, si) = apply_mask(tp, &y, re, im)?;
            let est = istft_var(tp, &stft, sr, si, n)?;
            si_snr_var(tp, est, &s)
        },
        &m_re,
        &opts,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");

    // the tape value equals the standalone metric
    let mut tape = Tape::new();
    let re = tape.constant(m_re.clone());
    let im = tape.constant(m_im.clone());
    let (sr, si) = apply_mask(&mut tape, &y, re, im).unwrap();
    let est = istft_var(&mut tape, &stft, sr, si, n).unwrap();
    let v = si_snr_var(&mut tape, est, &s).unwrap();
    let direct = si_snr(tape.value(est).data(), &s).unwrap();
    assert!((tape.value(v).data()[0] - direct).abs() < 1e-9, "{} vs {direct}", tape.value(v).data()[0]);
}

// ── GCC-PHAT ────────────────────────────────────────────────────────────

fn delayed(x: &[f64], d: usize) -> Vec<f64> {
    (0..x.len()).map(|i| if i >= d { x[i - d] } else { 0.0 }).collect()
}

#[test]
fn gcc_phat_recovers_delays() {
    let far = noise(24000, 20);
    for d in [0usize, 1, 160, 1234, 4000, 7999, 8000] {
        let mic = delayed(&far, d);
        let a = gcc_phat_align(&wave(mic.clone()), &wave(far.clone()), 0.5).unwrap();
        assert_eq!(a.delay_samples, d);
        assert_eq!(a.status, AlignmentStatus::Confident);
        assert_eq!(a.aligned_far.len(), mic.len());
        assert_eq!(a.aligned_far.samples(), &mic[..]);
    }
    // weak additive noise
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mic: Vec<f64> = delayed(&far, 160).iter().map(|v| v + rng.gen_range(-0.02..0.02)).collect();
    assert_eq!(gcc_phat_align(&wave(mic), &wave(far.clone()), 0.5).unwrap().delay_samples, 160);
}

#[test]
fn gcc_phat_silent_far_end() {
    let a = gcc_phat_align(&wave(noise(4000, 22)), &Waveform::zeros(4000), 0.5).unwrap();
    assert_eq!(a.delay_samples, 0);
    assert_eq!(a.status, AlignmentStatus::NoSignal);
}

#[test]
fn gcc_phat_out_of_window_is_low_confidence() {
    let far = noise(32000, 23);
    let mic = delayed(&far, 9600); // 0.6 s
    let a = gcc_phat_align(&wave(mic), &wave(far), 0.5).unwrap();
    assert!(a.delay_samples <= 8000);
    assert_eq!(a.status, AlignmentStatus::LowConfidence);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn gcc_phat_exact_on_clean_shifts(d in 0usize..=8000, seed in 0u64..50) {
        let far = noise(20000, seed);
        let a = gcc_phat_align(&wave(delayed(&far, d)), &wave(far), 0.5).unwrap();
        prop_assert_eq!(a.delay_samples, d);
    }
}

// ── CRM ─────────────────────────────────────────────────────────────────

fn random_spec(frames: usize, seed: u64) -> ComplexSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ComplexSpectrogram::zeros(frames, StftConfig::default(), frames * 256);
    for v in s.re.iter_mut().chain(s.im.iter_mut()) {
        *v = rng.gen_range(-3.0..3.0);
    }
    s
}

#[test]
fn crm_examples() {
    let y = random_spec(4, 30);
    let m = crm_compute(&y, &y).unwrap();
    for k in 0..m.re.len() {
        assert!((m.re[k] - 1.0).abs() < 1e-12 && m.im[k].abs() < 1e-12);
    }

    let mut y1 = ComplexSpectrogram::zeros(1, StftConfig::default(), 256);
    let mut s1 = y1.clone();
    y1.re.fill(1.0);
    s1.im.fill(1.0);
    let m = crm_compute(&y1, &s1).unwrap();
    assert!(m.re.iter().all(|&v| v == 0.0) && m.im.iter().all(|&v| v == 1.0));

    let zero = ComplexSpectrogram::zeros(4, StftConfig::default(), 1024);
    let m = crm_compute(&y, &zero).unwrap();
    assert!(m.re.iter().chain(&m.im).all(|&v| v == 0.0));

    // identity and zero masks
    let ident = CRMask::constant(4, 257, 1.0, 0.0);
    let out = crm_apply(&y, &ident).unwrap();
    for k in 0..y.re.len() {
        assert!((out.re[k] - y.re[k]).abs() < 1e-12 && (out.im[k] - y.im[k]).abs() < 1e-12);
    }
    let out = crm_apply(&y, &CRMask::constant(4, 257, 0.0, 0.0)).unwrap();
    assert!(out.re.iter().chain(&out.im).all(|&v| v == 0.0));
}

#[test]
fn crm_reconstructs_target_and_matches_product() {
    for seed in 0..20 {
        let y = random_spec(6, 100 + seed);
        let s = random_spec(6, 200 + seed);
        let m = crm_compute(&y, &s).unwrap();
        let back = crm_apply(&y, &m).unwrap();
        let prod = complex_product(&y, &m).unwrap();
        for k in 0..y.re.len() {
            let ymag2 = y.re[k].powi(2) + y.im[k].powi(2);
            let smag = s.re[k].hypot(s.im[k]);
            assert!((back.re[k] - prod.re[k]).abs() < 1e-9 && (back.im[k] - prod.im[k]).abs() < 1e-9);
            if ymag2 > 1e-6 && m.re[k].hypot(m.im[k]) < CRM_CLIP * (1.0 - 1e-9) {
                let err = (back.re[k] - s.re[k]).hypot(back.im[k] - s.im[k]);
                assert!(err <= 1e-7 * smag.max(1e-12), "bin {k}: {err}");
            }
        }
    }
}

#[test]
fn crm_clip_and_polar_round_trip() {
    let mut y = ComplexSpectrogram::zeros(1, StftConfig::default(), 256);
    let mut s = y.clone();
    y.re.fill(1e-3);
    s.re.fill(1.0);
    let m = crm_compute(&y, &s).unwrap();
    assert!(m.magnitude().iter().all(|&v| (v - CRM_CLIP).abs() < 1e-9));

    let m = crm_compute(&random_spec(3, 40), &random_spec(3, 41)).unwrap();
    let (mag, ph) = (m.magnitude(), m.phase());
    assert!(mag.iter().all(|&v| v >= 0.0));
    assert!(ph.iter().all(|&p| p > -PI && p <= PI));
    let rt = CRMask::from_polar(3, 257, &mag, &ph).unwrap();
    let (mag2, ph2) = (rt.magnitude(), rt.phase());
    for k in 0..mag.len() {
        if mag[k] > 1e-12 {
            assert!((mag[k] - mag2[k]).abs() < 1e-9 && (ph[k] - ph2[k]).abs() < 1e-9);
        }
    }
}

// ── SI-SNR / ERLE ───────────────────────────────────────────────────────

#[test]
fn si_snr_examples() {
    let s = noise(8000, 50);
    assert_eq!(si_snr(&s, &s).unwrap(), 60.0);
    let scaled: Vec<f64> = s.iter().map(|v| 3.0 * v).collect();
    assert_eq!(si_snr(&scaled, &s).unwrap(), 60.0);
    let v = si_snr(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
    assert!(v.abs() < 1e-6);
    assert!(matches!(si_snr(&[1.0, 0.0], &[0.0, 0.0]), Err(cmnet::Error::Contract(_))));
    assert!(si_snr(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn si_snr_scale_invariance() {
    let s = noise(16000, 51);
    let n = noise(16000, 52);
    let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + 0.3 * b).collect();
    let base = si_snr(&est, &s).unwrap();
    for alpha in [1e-3, 0.1, 1.0, 10.0, 1e3] {
        let e: Vec<f64> = est.iter().map(|v| alpha * v).collect();
        assert!((si_snr(&e, &s).unwrap() - base).abs() < 1e-6);
    }
}

#[test]
fn erle_examples() {
    let mic = noise(4000, 60);
    let est: Vec<f64> = mic.iter().map(|v| v / 10.0).collect();
    let v = erle(&mic, &est).unwrap();
    assert!((v - 20.0).abs() < 1e-12, "{v}");
    assert!(erle(&mic, &mic).unwrap().abs() < 1e-9);
    assert_eq!(erle(&mic, &vec![0.0; 4000]).unwrap(), 100.0);
}

#[test]
fn scale_to_ratio_examples() {
    let r = wave(noise(8000, 70));
    let s = wave(noise(8000, 71));
    let out = scale_to_ratio(&s, &r, 0.0, RatioKind::Ser).unwrap();
    let gain = out.samples()[0] / s.samples()[0];
    let expected = (active_power(r.samples()) / active_power(s.samples())).sqrt();
    assert!((gain - expected).abs() < 1e-12);

    let same = scale_to_ratio(&r, &r, 0.0, RatioKind::Snr).unwrap();
    assert!((same.samples()[5] / r.samples()[5] - 1.0).abs() < 1e-12);
    let down = scale_to_ratio(&r, &r, 20.0, RatioKind::Snr).unwrap();
    assert!((active_power(down.samples()) * 100.0 / active_power(r.samples()) - 1.0).abs() < 1e-9);

    for target in [-15.0, -3.5, 0.0, 7.2, 15.0] {
        let out = scale_to_ratio(&s, &r, target, RatioKind::Ser).unwrap();
        assert!((level_ratio_db(r.samples(), out.samples()) - target).abs() < 0.01);
    }
    assert!(scale_to_ratio(&Waveform::zeros(10), &r, 0.0, RatioKind::Snr).is_err());
}

// ── WAV ─────────────────────────────────────────────────────────────────

#[test]
fn wav_io_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let x = wave(noise(1600, 80));
    let p16 = dir.path().join("a.wav");
    write_wav(&p16, &x).unwrap();
    let back = read_wav(&p16).unwrap();
    assert_eq!(back.len(), x.len());
    assert!(back.samples().iter().zip(x.samples()).all(|(a, b)| (a - b).abs() < 1.0 / 16000.0));

    let pf = dir.path().join("f.wav");
    write_wav_f32(&pf, &x).unwrap();
    let back = read_wav(&pf).unwrap();
    assert!(back.samples().iter().zip(x.samples()).all(|(a, b)| (a - b).abs() < 1e-7));

    let wrong = Waveform::with_rate(vec![0.0; 100], 8000).unwrap();
    let p8 = dir.path().join("r.wav");
    write_wav(&p8, &wrong).unwrap();
    assert!(matches!(read_wav(&p8), Err(cmnet::Error::Format(_))));
    assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(cmnet::Error::Io { .. })));

    // clipping at ±1
    let loud = wave(vec![2.0, -3.0, 0.5]);
    write_wav(&p16, &loud).unwrap();
    let back = read_wav(&p16).unwrap();
    assert!((back.samples()[0] - 32767.0 / 32768.0).abs() < 1e-9);
    assert!((back.samples()[1] + 32767.0 / 32768.0).abs() < 1e-9);
}

#[test]
fn waveform_rejects_non_finite() {
    assert!(matches!(Waveform::new(vec![0.0, f64::NAN]), Err(cmnet::Error::NonFinite(_))));
}
