//! Finite-difference verification of every layer type and of the
//! end-to-end model, reported per named block.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cm::{complement_mask, fc_block, gru_forward, interactive_block};
use crate::data::{mix_scenario, ScenarioKind, ScenarioSpec};
use crate::error::Result;
use crate::model::{init_parameters, AblationCase, Graph, Mode, ModelConfig, ParameterStore};
use crate::signal::differentiable::{apply_mask, istft_var, si_snr_var};
use crate::signal::Waveform;
use crate::tensor::{
    causal_mask, finite_difference_check, BnMode, Conv2dGeometry, ConvTransposeGeometry, GradCheckOptions,
    GradCheckReport, Tape, Tensor, Var,
};
use crate::train::{default_stft, loss_pass, prepare, Prepared, Utterance};

/// Minimum number of checked entries per named model block.
pub const ENTRIES_PER_BLOCK: usize = 22;
/// Samples of the end-to-end probe utterance (eight frames).
pub const PROBE_SAMPLES: usize = 2048;
/// Cap on probed entries per tensor, as a multiple of the target count.
pub const MAX_DRAWS_PER_TENSOR: usize = 4;
/// Finite-difference step of the suite's five-point stencil.
pub const SUITE_STEP: f64 = 1e-3;

/// Five-point stencil at [`SUITE_STEP`].
pub fn suite_options(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        step: SUITE_STEP,
        five_point: true,
        freeze_kinks: true,
        ..GradCheckOptions::with_tol(tol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    /// `layer:<op>` for isolated layers, otherwise the parameter block.
    pub block: String,
    /// Toggle case of an end-to-end check.
    pub case: Option<AblationCase>,
    pub checked: usize,
    pub kink_skips: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl BlockCheck {
    fn from_reports(block: &str, case: Option<AblationCase>, reports: &[GradCheckReport]) -> Self {
        let checked = reports.iter().map(|r| r.checked).sum();
        Self {
            block: block.to_string(),
            case,
            checked,
            kink_skips: reports.iter().map(|r| r.kink_skips).sum(),
            max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
            passed: checked > 0 && reports.iter().all(|r| r.passed || r.checked == 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSuite {
    pub tol: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckSuite {
    pub fn passed(&self) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|b| b.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| !b.passed)
    }

    pub fn to_text(&self) -> String {
        let mut t = format!(
            "{:<6} {:<24} {:>7} {:>6} {:>12}  result (tol {:e})\n",
            "case", "block", "checked", "kinks", "max rel err", self.tol
        );
        for b in &self.blocks {
            let _ = writeln!(
                t,
                "{:<6} {:<24} {:>7} {:>6} {:>12.3e}  {}",
                b.case.map_or_else(|| "-".to_string(), |c| c.index().to_string()),
                b.block,
                b.checked,
                b.kink_skips,
                b.max_rel_err,
                if b.passed { "pass" } else { "FAIL" }
            );
        }
        t
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Random weighting makes every output entry matter.
fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    tape.dot(y, wv)
}

/// Isolated checks of every differentiable layer type.
pub fn layer_checks(seed: u64, opts: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = opts.clone();
    let mut out = Vec::new();
    let mut push = |name: &str, reports: Vec<GradCheckReport>| out.push(BlockCheck::from_reports(name, None, &reports));

    let x = randn(&[2, 5, 9], &mut rng);
    let w = randn(&[3, 2, 3, 5], &mut rng);
    let b = randn(&[3], &mut rng);
    let geo = Conv2dGeometry::causal((3, 5), (1, 2));
    let wy = randn(&[3, 5, 5], &mut rng);
    let conv = |xv: &Tensor, wv: &Tensor, bv: &Tensor, which: usize| {
        let (xv, wv, bv, wy) = (xv.clone(), wv.clone(), bv.clone(), wy.clone());
        move |tape: &mut Tape, v: Var| {
            let x = if which == 0 { v } else { tape.constant(xv.clone()) };
            let w = if which == 1 { v } else { tape.constant(wv.clone()) };
            let b = if which == 2 { v } else { tape.constant(bv.clone()) };
            let y = tape.conv2d(x, w, Some(b), geo)?;
            weighted(tape, y, &wy)
        }
    };
    push(
        "layer:conv2d",
        vec![
            finite_difference_check(conv(&x, &w, &b, 0), &x, &opts)?,
            finite_difference_check(conv(&x, &w, &b, 1), &w, &opts)?,
            finite_difference_check(conv(&x, &w, &b, 2), &b, &opts)?,
        ],
    );

    let tw = randn(&[2, 3, 3, 5], &mut rng);
    let tb = randn(&[3], &mut rng);
    let tgeo = ConvTransposeGeometry::causal(5, (3, 5), (1, 2), 17);
    let wt = randn(&[3, 5, 17], &mut rng);
    let deconv = |which: usize| {
        let (xv, wv, bv, wt) = (x.clone(), tw.clone(), tb.clone(), wt.clone());
        move |tape: &mut Tape, v: Var| {
            let x = if which == 0 { v } else { tape.constant(xv.clone()) };
            let w = if which == 1 { v } else { tape.constant(wv.clone()) };
            let b = if which == 2 { v } else { tape.constant(bv.clone()) };
            let y = tape.conv_transpose2d(x, w, Some(b), tgeo)?;
            weighted(tape, y, &wt)
        }
    };
    push(
        "layer:conv_transpose2d",
        vec![
            finite_difference_check(deconv(0), &x, &opts)?,
            finite_difference_check(deconv(1), &tw, &opts)?,
            finite_difference_check(deconv(2), &tb, &opts)?,
        ],
    );

    let gamma = randn(&[2], &mut rng);
    let beta = randn(&[2], &mut rng);
    let wx = randn(&[2, 5, 9], &mut rng);
    let (mean, var) = (vec![0.3, -0.2], vec![1.5, 0.7]);
    let bn = |which: usize, train: bool| {
        let (xv, gv, bv, wx, mean, var) = (x.clone(), gamma.clone(), beta.clone(), wx.clone(), mean.clone(), var.clone());
        move |tape: &mut Tape, v: Var| {
            let x = if which == 0 { v } else { tape.constant(xv.clone()) };
            let g = if which == 1 { v } else { tape.constant(gv.clone()) };
            let b = if which == 2 { v } else { tape.constant(bv.clone()) };
            let mode = match train {
                true => BnMode::Train,
                false => BnMode::Infer { mean: &mean, var: &var },
            };
            let (y, _) = tape.batch_norm(x, g, b, mode)?;
            weighted(tape, y, &wx)
        }
    };
    push(
        "layer:batch_norm",
        vec![
            finite_difference_check(bn(0, true), &x, &opts)?,
            finite_difference_check(bn(1, true), &gamma, &opts)?,
            finite_difference_check(bn(2, true), &beta, &opts)?,
            finite_difference_check(bn(0, false), &x, &opts)?,
            finite_difference_check(bn(1, false), &gamma, &opts)?,
        ],
    );

    let alpha = randn(&[2, 1, 1], &mut rng).map(|v| 0.25 + 0.1 * v);
    let prelu = |which: usize| {
        let (xv, av, wx) = (x.clone(), alpha.clone(), wx.clone());
        move |tape: &mut Tape, v: Var| {
            let x = if which == 0 { v } else { tape.constant(xv.clone()) };
            let a = if which == 1 { v } else { tape.constant(av.clone()) };
            let y = tape.prelu(x, a)?;
            weighted(tape, y, &wx)
        }
    };
    push(
        "layer:prelu",
        vec![
            finite_difference_check(prelu(0), &x, &opts)?,
            finite_difference_check(prelu(1), &alpha, &opts)?,
        ],
    );

    let xl = randn(&[4, 6], &mut rng);
    let wl = randn(&[6, 3], &mut rng);
    let bl = randn(&[3], &mut rng);
    let wo = randn(&[4, 3], &mut rng);
    let linear = |which: usize| {
        let (xv, wv, bv, wo) = (xl.clone(), wl.clone(), bl.clone(), wo.clone());
        move |tape: &mut Tape, v: Var| {
            let x = if which == 0 { v } else { tape.constant(xv.clone()) };
            let w = if which == 1 { v } else { tape.constant(wv.clone()) };
            let b = if which == 2 { v } else { tape.constant(bv.clone()) };
            let y = tape.matmul(x, w)?;
            let y = tape.add(y, b)?;
            weighted(tape, y, &wo)
        }
    };
    push(
        "layer:linear",
        vec![
            finite_difference_check(linear(0), &xl, &opts)?,
            finite_difference_check(linear(1), &wl, &opts)?,
            finite_difference_check(linear(2), &bl, &opts)?,
        ],
    );

    let ws = randn(&[2, 5, 9], &mut rng);
    push(
        "layer:sigmoid_tanh",
        vec![
            finite_difference_check(|tape, v| { let y = tape.sigmoid(v); weighted(tape, y, &ws) }, &x, &opts)?,
            finite_difference_check(|tape, v| { let y = tape.tanh(v); weighted(tape, y, &ws) }, &x, &opts)?,
        ],
    );

    let sq = randn(&[5, 5], &mut rng);
    let wsq = randn(&[5, 5], &mut rng);
    let mask = causal_mask(5);
    push(
        "layer:causal_softmax",
        vec![finite_difference_check(
            |tape, v| {
                let y = tape.masked_softmax(v, 1, Some(&mask))?;
                weighted(tape, y, &wsq)
            },
            &sq,
            &opts,
        )?],
    );

    // collaboration-module layers on toy parameters
    let cfg = ModelConfig::toy();
    let store = init_parameters(&cfg)?;
    let c = cfg.bottleneck_channels();
    let f = cfg.bottleneck_bins()?;
    let xg = randn(&[6, 1], &mut rng);
    let wg = randn(&[6, cfg.gru_hidden], &mut rng);
    push(
        "layer:gru",
        vec![finite_difference_check(
            |tape, v| {
                let mut g = Graph::new(tape, &store, Mode::Infer);
                let h = gru_forward(&mut g, "gru_tp", v)?;
                weighted(g.tape, h, &wg)
            },
            &xg,
            &opts,
        )?],
    );

    let fin = randn(&[c, 3, f], &mut rng);
    let mut sub = opts.clone();
    sub.indices = Some(spread_indices(fin.len(), 256, &mut rng));
    let mfc = randn(&[c, 3, f], &mut rng).map(|v| 0.5 + 0.4 * v);
    let wf = randn(&[c, 3, f], &mut rng);
    push(
        "layer:fc_attention",
        vec![
            finite_difference_check(
                |tape, v| {
                    let mut g = Graph::new(tape, &store, Mode::Infer);
                    let m = g.tape.constant(mfc.clone());
                    let (y, _) = fc_block(&mut g, "fc_tp", v, Some(m))?;
                    weighted(g.tape, y, &wf)
                },
                &fin,
                &sub,
            )?,
            finite_difference_check(
                |tape, v| {
                    let mut g = Graph::new(tape, &store, Mode::Infer);
                    let x = g.tape.constant(fin.clone());
                    let m = complement_mask(g.tape, v);
                    let (y, _) = fc_block(&mut g, "fc_tn", x, Some(m))?;
                    weighted(g.tape, y, &wf)
                },
                &mfc,
                &sub,
            )?,
        ],
    );

    let f_tn = randn(&[c, 3, f], &mut rng);
    push(
        "layer:interactive",
        vec![finite_difference_check(
            |tape, v| {
                let mut g = Graph::new(tape, &store, Mode::Infer);
                let b = g.tape.constant(f_tn.clone());
                let (y, _, _) = interactive_block(&mut g, v, b)?;
                weighted(g.tape, y, &wf)
            },
            &fin,
            &sub,
        )?],
    );

    let p = probe(seed, ScenarioKind::DoubleTalk)?;
    let stft = default_stft();
    let (t, bins) = (p.mic_spec.frames, p.mic_spec.bins);
    let m0 = randn(&[2, t, bins], &mut rng).map(|v| 0.5 + 0.3 * v);
    let mut spread = opts.clone();
    spread.indices = Some(spread_indices(m0.len(), 64, &mut rng));
    push(
        "layer:mask_istft_si_snr",
        vec![finite_difference_check(|tape, v| masked_loss(tape, &stft, &p, v, true), &m0, &spread)?],
    );
    let fe = probe(seed, ScenarioKind::FarEnd)?;
    push(
        "layer:mask_istft_erle",
        vec![finite_difference_check(|tape, v| masked_loss(tape, &stft, &fe, v, false), &m0, &spread)?],
    );
    Ok(out)
}

fn masked_loss(tape: &mut Tape, stft: &Arc<crate::signal::Stft>, p: &Prepared, m: Var, si: bool) -> Result<Var> {
    let (t, f) = (p.mic_spec.frames, p.mic_spec.bins);
    let re = tape.slice(m, 0, 0, 1)?;
    let re = tape.reshape(re, &[t, f])?;
    let im = tape.slice(m, 0, 1, 1)?;
    let im = tape.reshape(im, &[t, f])?;
    let (sr, si_) = apply_mask(tape, &p.mic_spec, re, im)?;
    let est = istft_var(tape, stft, sr, si_, p.utterance.mic.len())?;
    if si {
        si_snr_var(tape, est, p.utterance.near.samples())
    } else {
        let e = tape.dot(est, est)?;
        let e = tape.add_scalar(e, 1e-10);
        Ok(tape.log(e))
    }
}

fn spread_indices(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ix = sample(rng, len, n.min(len)).into_vec();
    ix.sort_unstable();
    ix
}

/// A [`PROBE_SAMPLES`]-long excerpt of a seeded scenario, taken where the
/// target (or, without near-end speech, the microphone) is most energetic.
pub fn probe(seed: u64, kind: ScenarioKind) -> Result<Prepared> {
    let spec = match kind {
        ScenarioKind::DoubleTalk => ScenarioSpec::double_talk(0.0, 1.0, seed),
        ScenarioKind::NearEnd => ScenarioSpec::near_end(1.0, seed),
        ScenarioKind::FarEnd => ScenarioSpec::far_end(1.0, seed),
    };
    let m = mix_scenario(&spec)?;
    let focus = if kind.has_near_end() { &m.s } else { &m.y };
    let energy = |o: usize| focus.samples()[o..o + PROBE_SAMPLES].iter().map(|v| v * v).sum::<f64>();
    let start = (0..=m.y.len() - PROBE_SAMPLES)
        .step_by(256)
        .max_by(|&a, &b| energy(a).total_cmp(&energy(b)))
        .unwrap_or(0);
    let cut = |w: &Waveform| Waveform::new(w.samples()[start..start + PROBE_SAMPLES].to_vec());
    let mut utt = Utterance::recorded(kind, cut(&m.y)?, cut(&m.x)?, cut(&m.s)?)?;
    utt.seed = seed;
    prepare(&default_stft(), utt)
}

/// End-to-end checks of the training loss with respect to every named
/// parameter block of `cfg`. Each block gets at least
/// [`ENTRIES_PER_BLOCK`] sampled entries, at least two per tensor.
pub fn model_checks(cfg: &ModelConfig, p: &Prepared, seed: u64, base: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    let store = init_parameters(cfg)?;
    let stft = default_stft();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<(String, Vec<String>)> = Vec::new();
    for e in store.trainable() {
        let block = e.name.split('.').next().unwrap_or(&e.name).to_string();
        match blocks.last_mut() {
            Some((b, names)) if *b == block => names.push(e.name.clone()),
            _ => blocks.push((block, vec![e.name.clone()])),
        }
    }
    let case = AblationCase::from_toggles(cfg.toggles);
    let mut out = Vec::new();
    for (block, names) in blocks {
        let per_tensor = ENTRIES_PER_BLOCK.div_ceil(names.len()).max(2);
        let mut reports = Vec::new();
        for name in &names {
            let x = store.get(name).expect("trainable entry").clone();
            // probes that cross a kink are skipped; draw replacements
            let mut shuffled: Vec<usize> = (0..x.len()).collect();
            shuffled.shuffle(&mut rng);
            let mut pos = 0;
            let mut checked = 0;
            while checked < per_tensor && pos < shuffled.len() {
                let take = (per_tensor - checked).min(shuffled.len() - pos);
                let mut opts = base.clone();
                opts.indices = Some(shuffled[pos..pos + take].to_vec());
                pos += take;
                let r = finite_difference_check(|tape, v| loss_with(tape, &store, cfg, &stft, p, name, v), &x, &opts)?;
                checked += r.checked;
                reports.push(r);
                if pos >= MAX_DRAWS_PER_TENSOR * per_tensor {
                    break;
                }
            }
        }
        out.push(BlockCheck::from_reports(&block, case, &reports));
    }
    Ok(out)
}

fn loss_with(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    stft: &Arc<crate::signal::Stft>,
    p: &Prepared,
    name: &str,
    v: Var,
) -> Result<Var> {
    let mut g = Graph::new(tape, store, Mode::Train).with_override(name, v);
    Ok(loss_pass(&mut g, cfg, stft, p)?.loss)
}

/// Layer checks plus end-to-end checks of `base` under every toggle case.
pub fn run_gradcheck(base: &ModelConfig, cases: &[AblationCase], seed: u64, tol: f64) -> Result<GradcheckSuite> {
    let opts = suite_options(tol);
    let mut blocks = layer_checks(seed, &opts)?;
    let p = probe(seed, ScenarioKind::DoubleTalk)?;
    for &case in cases {
        blocks.extend(model_checks(&base.clone().with_case(case), &p, seed, &opts)?);
    }
    Ok(GradcheckSuite { tol, blocks })
}
