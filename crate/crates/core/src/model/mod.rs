//! Encoder, collaboration module and gated decoder mapping four spectrogram
//! planes to a complex ratio mask.
//!
//! Layout is `[C, T, F]` throughout. Time stride is always 1 and time
//! padding is past-only, so inference-mode outputs at frame `t` depend on
//! input frames `0..=t` only. In every stage after the first, batch norm and
//! PReLU precede the convolution.

pub mod accounting;
pub mod config;
mod graph;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use accounting::{param_report, ParamReport, AMBIGUITIES, REFERENCE_TOTAL};
pub use config::{AblationCase, ModelConfig, Toggles, INPUT_BINS, INPUT_PLANES, OUTPUT_PLANES};
pub use graph::{Graph, Mode};
pub use params::{load_checkpoint, load_checkpoint_for, sha256_hex, Entry, ParameterStore, Role};

use crate::cm::{self, CmTrace};
use crate::error::{shape_err, Error, Result};
use crate::signal::{CRMask, ComplexSpectrogram};
use crate::tensor::{Conv2dGeometry, ConvTransposeGeometry, Tape, Tensor, Var};
use params::Init;

/// Encoder outputs. `skips[k]` is the input of encoder stage `k`
/// (the raw planes, then the stage-1 and stage-2 outputs).
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub bottleneck: Var,
    pub skips: [Var; 3],
}

/// Shape of every stage and the collaboration-module handles of one pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub stages: Vec<(String, Vec<usize>)>,
    pub cm: CmTrace,
    /// Sigmoid gates of the three decoder blocks.
    pub gates: Vec<Var>,
}

impl ForwardTrace {
    fn record(&mut self, tape: &Tape, name: &str, v: Var) {
        self.stages.push((name.to_string(), tape.shape(v).to_vec()));
    }
}

pub struct ModelOutput {
    /// `[2, T, F]`: real and imaginary mask planes.
    pub mask: Var,
    pub trace: ForwardTrace,
}

/// Fresh parameters for `cfg`, drawn from `cfg.seed` and rounded to `f32`.
pub fn init_parameters(cfg: &ModelConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let [c1, c2, c3] = cfg.encoder_channels;
    let k = cfg.encoder_kernel;
    init.conv("enc1.conv", c1, INPUT_PLANES, k)?;
    for (s, (c_in, c_out)) in [(c1, c2), (c2, c3)].into_iter().enumerate() {
        let p = format!("enc{}", s + 2);
        init.batch_norm(&format!("{p}.bn"), c_in)?;
        init.prelu(&format!("{p}.prelu"), c_in)?;
        init.conv(&format!("{p}.conv"), c_out, c_in, k)?;
    }

    cm::declare(&mut init, cfg, cfg.bottleneck_bins()?)?;

    let skip_channels = [c2, c1, INPUT_PLANES];
    let mut deep = c3;
    for (b, (&c_dec, &c_skip)) in cfg.decoder_channels.iter().zip(&skip_channels).enumerate() {
        let p = format!("dec{}", b + 1);
        init.batch_norm(&format!("{p}.in.bn"), deep)?;
        init.prelu(&format!("{p}.in.prelu"), deep)?;
        init.deconv(&format!("{p}.deconv"), deep, c_dec, cfg.decoder_kernel)?;
        init.batch_norm(&format!("{p}.gate.bn"), c_dec)?;
        init.prelu(&format!("{p}.gate.prelu"), c_dec)?;
        init.conv(&format!("{p}.gate.conv"), c_skip, c_dec, (1, 1))?;
        init.batch_norm(&format!("{p}.fuse.bn"), c_skip + c_dec)?;
        init.prelu(&format!("{p}.fuse.prelu"), c_skip + c_dec)?;
        init.conv(&format!("{p}.fuse.conv"), c_dec, c_skip + c_dec, (1, 1))?;
        deep = c_dec;
    }
    init.batch_norm("out.bn", deep)?;
    init.prelu("out.prelu", deep)?;
    init.conv("out.conv", OUTPUT_PLANES, deep, (1, 1))?;
    Ok(store)
}

/// Three causal conv stages, `4 -> c1 -> c2 -> c3` channels.
pub fn encoder_forward(g: &mut Graph<'_>, cfg: &ModelConfig, input: Var) -> Result<EncoderOutput> {
    let (c, _, f) = g.dims3(input)?;
    if c != INPUT_PLANES || f != INPUT_BINS {
        return Err(shape_err!(
            "encoder expects [{INPUT_PLANES}, T, {INPUT_BINS}], got {:?}",
            g.tape.shape(input)
        ));
    }
    let geo = |s: usize| Conv2dGeometry::causal(cfg.encoder_kernel, cfg.encoder_strides[s]);
    let h1 = g.conv("enc1.conv", input, geo(0))?;
    let a = g.bn_prelu("enc2", h1)?;
    let h2 = g.conv("enc2.conv", a, geo(1))?;
    let a = g.bn_prelu("enc3", h2)?;
    let h3 = g.conv("enc3.conv", a, geo(2))?;
    Ok(EncoderOutput {
        bottleneck: h3,
        skips: [input, h1, h2],
    })
}

/// Decoder block `block` (0-based):
/// `u = deconv(act(deep))`, `g = σ(conv1x1(act(u)))`,
/// `out = conv1x1(act([g ⊙ skip, u]))`, where `act` is batch norm then PReLU.
pub fn gated_block_forward(g: &mut Graph<'_>, cfg: &ModelConfig, block: usize, deep: Var, skip: Var) -> Result<Var> {
    Ok(gated_block_parts(g, cfg, block, deep, skip)?.0)
}

/// [`gated_block_forward`] that also returns the gate.
pub fn gated_block_parts(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    block: usize,
    deep: Var,
    skip: Var,
) -> Result<(Var, Var)> {
    let p = format!("dec{}", block + 1);
    let (_, t, _) = g.dims3(deep)?;
    let (_, t_skip, f_skip) = g.dims3(skip)?;
    if t_skip != t {
        return Err(shape_err!("skip has {} frames, decoder input {}", t_skip, t));
    }
    let a = g.bn_prelu(&format!("{p}.in"), deep)?;
    let geo = ConvTransposeGeometry::causal(t, cfg.decoder_kernel, cfg.decoder_strides[block], f_skip);
    let u = g.deconv(&format!("{p}.deconv"), a, geo)?;
    if g.tape.shape(u)[1..] != g.tape.shape(skip)[1..] {
        return Err(shape_err!(
            "decoder stage {} produced {:?}, skip is {:?}",
            block + 1,
            g.tape.shape(u),
            g.tape.shape(skip)
        ));
    }
    let b = g.bn_prelu(&format!("{p}.gate"), u)?;
    let pw = Conv2dGeometry::unpadded((1, 1));
    let gate = g.conv(&format!("{p}.gate.conv"), b, pw)?;
    let gate = g.tape.sigmoid(gate);
    let masked = g.tape.mul(gate, skip)?;
    let cat = g.tape.concat(&[masked, u], 0)?;
    let d = g.bn_prelu(&format!("{p}.fuse"), cat)?;
    Ok((g.conv(&format!("{p}.fuse.conv"), d, pw)?, gate))
}

/// Three gated blocks then a pointwise conv to the two mask planes; no
/// output nonlinearity.
pub fn decoder_forward(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    bottleneck: Var,
    skips: &[Var; 3],
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let mut h = bottleneck;
    for block in 0..3 {
        let (out, gate) = gated_block_parts(g, cfg, block, h, skips[2 - block])?;
        h = out;
        trace.gates.push(gate);
        trace.record(g.tape, &format!("dec{}", block + 1), h);
    }
    let a = g.bn_prelu("out", h)?;
    let m = g.conv("out.conv", a, Conv2dGeometry::unpadded((1, 1)))?;
    trace.record(g.tape, "mask", m);
    Ok(m)
}

/// Stacks `[X_r, X_i, Y_r, Y_i]` as a `[4, T, F]` tensor.
pub fn stack_planes(far: &ComplexSpectrogram, mic: &ComplexSpectrogram) -> Result<Tensor> {
    if !far.same_shape(mic) {
        return Err(Error::Contract(format!(
            "far-end {}x{} and microphone {}x{} spectrograms differ",
            far.frames, far.bins, mic.frames, mic.bins
        )));
    }
    let mut data = Vec::with_capacity(4 * far.re.len());
    for plane in [&far.re, &far.im, &mic.re, &mic.im] {
        data.extend_from_slice(plane);
    }
    Tensor::new(&[INPUT_PLANES, far.frames, far.bins], data)
}

/// Full network on a stacked `[4, T, F]` input.
pub fn forward_planes(g: &mut Graph<'_>, cfg: &ModelConfig, input: Var) -> Result<ModelOutput> {
    let mut trace = ForwardTrace::default();
    trace.record(g.tape, "input", input);
    let enc = encoder_forward(g, cfg, input)?;
    trace.record(g.tape, "enc1", enc.skips[1]);
    trace.record(g.tape, "enc2", enc.skips[2]);
    trace.record(g.tape, "enc3", enc.bottleneck);
    let (mid, cm_trace) = cm::cm_forward(g, cfg, enc.bottleneck)?;
    trace.cm = cm_trace;
    trace.record(g.tape, "cm", mid);
    let mask = decoder_forward(g, cfg, mid, &enc.skips, &mut trace)?;
    Ok(ModelOutput { mask, trace })
}

/// Network on the delay-aligned far-end spectrogram `far` and the
/// microphone spectrogram `mic`.
pub fn cmnet_forward(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    far: &ComplexSpectrogram,
    mic: &ComplexSpectrogram,
) -> Result<ModelOutput> {
    let planes = stack_planes(far, mic)?;
    let input = g.tape.constant(planes);
    forward_planes(g, cfg, input)
}

/// Splits a `[2, T, F]` mask tensor into a [`CRMask`].
pub fn mask_from_tensor(m: &Tensor) -> Result<CRMask> {
    let [2, t, f] = *m.shape() else {
        return Err(shape_err!("mask tensor must be [2, T, F], got {:?}", m.shape()));
    };
    let (re, im) = m.data().split_at(t * f);
    CRMask::new(t, f, re.to_vec(), im.to_vec())
}

/// Inference-mode mask for one utterance.
pub fn infer_mask(
    store: &ParameterStore,
    cfg: &ModelConfig,
    far: &ComplexSpectrogram,
    mic: &ComplexSpectrogram,
) -> Result<CRMask> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store, Mode::Infer);
    let out = cmnet_forward(&mut g, cfg, far, mic)?;
    mask_from_tensor(tape.value(out.mask))
}

/// Total trainable scalars; see [`ParameterStore::breakdown`] for the
/// per-block split.
pub fn param_count(store: &ParameterStore) -> usize {
    store.param_count()
}
