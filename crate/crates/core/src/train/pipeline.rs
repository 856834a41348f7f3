use std::sync::Arc;

use crate::data::{Mixture, ScenarioKind};
use crate::error::{Error, Result};
use crate::model::{cmnet_forward, infer_mask, Graph, ModelConfig, ModelOutput, ParameterStore};
use crate::signal::differentiable::{apply_mask, floor_scalar, istft_var, si_snr_var};
use crate::signal::{
    crm_apply, crm_compute, gcc_phat_align, Alignment, ComplexSpectrogram, Stft, StftConfig, Waveform,
    DEFAULT_MAX_DELAY_S, ERLE_EPS,
};
use crate::tensor::{Tape, Var};

/// One evaluation or training item: microphone, far-end reference and
/// near-end target, all of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub kind: ScenarioKind,
    /// Scenario seed, or an arbitrary label for recorded data.
    pub seed: u64,
    pub mic: Waveform,
    pub far: Waveform,
    pub near: Waveform,
}

impl From<&Mixture> for Utterance {
    fn from(m: &Mixture) -> Self {
        Self {
            kind: m.spec.kind,
            seed: m.spec.seed,
            mic: m.y.clone(),
            far: m.x.clone(),
            near: m.s.clone(),
        }
    }
}

impl Utterance {
    /// Recorded triplet; `kind` selects the metric.
    pub fn recorded(kind: ScenarioKind, mic: Waveform, far: Waveform, near: Waveform) -> Result<Self> {
        if mic.len() != far.len() || mic.len() != near.len() {
            return Err(Error::Contract(format!(
                "mic, far-end and target lengths differ: {}, {}, {}",
                mic.len(),
                far.len(),
                near.len()
            )));
        }
        Ok(Self {
            kind,
            seed: 0,
            mic,
            far,
            near,
        })
    }
}

/// Spectrograms of an aligned utterance.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub utterance: Utterance,
    pub alignment: Alignment,
    pub mic_spec: ComplexSpectrogram,
    pub far_spec: ComplexSpectrogram,
}

pub fn default_stft() -> Arc<Stft> {
    Arc::new(Stft::new(StftConfig::default()).expect("default STFT configuration is valid"))
}

/// Aligns the far end to the microphone and takes both spectrograms.
pub fn prepare(stft: &Stft, utterance: Utterance) -> Result<Prepared> {
    let alignment = gcc_phat_align(&utterance.mic, &utterance.far, DEFAULT_MAX_DELAY_S)?;
    let mic_spec = stft.analyze(&utterance.mic)?;
    let far_spec = stft.analyze(&alignment.aligned_far)?;
    Ok(Prepared {
        utterance,
        alignment,
        mic_spec,
        far_spec,
    })
}

/// Tape handles of one differentiable pass.
pub struct LossPass {
    pub loss: Var,
    /// Time-domain estimate.
    pub estimate: Var,
    pub output: ModelOutput,
}

/// `mask -> Y·M -> iSTFT -> loss` on the tape. The loss is `-SI-SNR`
/// against the near-end target, or, without near-end speech, the
/// residual-to-microphone energy ratio in dB (negative ERLE).
pub fn loss_pass(g: &mut Graph<'_>, cfg: &ModelConfig, stft: &Arc<Stft>, p: &Prepared) -> Result<LossPass> {
    let output = cmnet_forward(g, cfg, &p.far_spec, &p.mic_spec)?;
    let (t, f) = (p.mic_spec.frames, p.mic_spec.bins);
    let tape = &mut *g.tape;
    let re = tape.slice(output.mask, 0, 0, 1)?;
    let re = tape.reshape(re, &[t, f])?;
    let im = tape.slice(output.mask, 0, 1, 1)?;
    let im = tape.reshape(im, &[t, f])?;
    let (sr, si) = apply_mask(tape, &p.mic_spec, re, im)?;
    let estimate = istft_var(tape, stft, sr, si, p.utterance.mic.len())?;
    let loss = match p.utterance.kind.has_near_end() {
        true => {
            let snr = si_snr_var(tape, estimate, p.utterance.near.samples())?;
            tape.neg(snr)
        }
        false => residual_ratio_db(tape, estimate, p.utterance.mic.samples())?,
    };
    Ok(LossPass { loss, estimate, output })
}

fn residual_ratio_db(tape: &mut Tape, est: Var, mic: &[f64]) -> Result<Var> {
    let mic_energy: f64 = mic.iter().map(|v| v * v).sum();
    let e = tape.dot(est, est)?;
    let e = floor_scalar(tape, e, ERLE_EPS);
    let l = tape.log(e);
    let db = tape.scale(l, 10.0 / std::f64::consts::LN_10);
    Ok(tape.add_scalar(db, -10.0 * mic_energy.max(ERLE_EPS).log10()))
}

/// How an estimate of the near-end signal is produced.
#[derive(Clone, Copy)]
pub enum Enhancer<'a> {
    Model { store: &'a ParameterStore, cfg: &'a ModelConfig },
    /// The microphone signal unchanged.
    Identity,
    /// The ideal mask computed from the known target.
    Oracle,
}

/// Inference-mode estimate of the near-end signal, same length as the
/// microphone signal.
pub fn estimate(stft: &Stft, p: &Prepared, enhancer: Enhancer<'_>) -> Result<Waveform> {
    let n = p.utterance.mic.len();
    let spec = match enhancer {
        Enhancer::Identity => return Ok(p.utterance.mic.clone()),
        Enhancer::Model { store, cfg } => {
            let mask = infer_mask(store, cfg, &p.far_spec, &p.mic_spec)?;
            crm_apply(&p.mic_spec, &mask)?
        }
        Enhancer::Oracle => {
            let target = stft.analyze(&p.utterance.near)?;
            crm_apply(&p.mic_spec, &crm_compute(&p.mic_spec, &target)?)?
        }
    };
    let mut out = stft.synthesize(&spec)?.into_samples();
    out.truncate(n);
    Waveform::with_rate(out, p.utterance.mic.sample_rate())
}

/// Result of [`enhance`].
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub output: Waveform,
    pub alignment: Alignment,
}

/// Full inference pipeline on a microphone / far-end pair. The far end is
/// shifted, then padded or truncated to the microphone length.
pub fn enhance(store: &ParameterStore, cfg: &ModelConfig, mic: &Waveform, far: &Waveform) -> Result<Enhanced> {
    let stft = default_stft();
    let utt = Utterance {
        kind: ScenarioKind::DoubleTalk,
        seed: 0,
        mic: mic.clone(),
        far: far.clone(),
        near: Waveform::zeros(mic.len()),
    };
    let p = prepare(&stft, utt)?;
    let output = estimate(&stft, &p, Enhancer::Model { store, cfg })?;
    Ok(Enhanced {
        output,
        alignment: p.alignment,
    })
}
