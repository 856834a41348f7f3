//! Collaboration module: a sigmoid mask that highlights target-positive
//! features, its complement for target-negative features, one feature
//! catcher per mask, and a recurrent per-frame selection between the two
//! branches.
//!
//! All blocks act on the `[C, T, F']` bottleneck and preserve its shape.
//! Every path is causal in time.

mod fc;
mod gru;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use fc::{fc_block, FcTrace};
pub use gru::gru_forward;

use crate::error::{Error, Result};
use crate::model::params::{Init, ParameterStore};
use crate::model::{Graph, Mode, ModelConfig};
use crate::tensor::{Conv2dGeometry, Tape, Tensor, Var};

/// Tape handles of a collaboration-module evaluation; absent entries
/// belong to disabled branches.
#[derive(Clone, Debug, Default)]
pub struct CmTrace {
    pub m_tp: Option<Var>,
    pub m_tn: Option<Var>,
    pub f_tp: Option<Var>,
    pub f_tn: Option<Var>,
    /// Per-frame selection weights, `[1, T, 1]`.
    pub w_tp: Option<Var>,
    pub w_tn: Option<Var>,
    pub fc: Vec<FcTrace>,
    /// Number of feature-catcher blocks evaluated.
    pub fc_invocations: usize,
}

/// `σ(conv(relu(conv(F))))` with causal shape-preserving convolutions.
pub fn conv_block_mask(g: &mut Graph<'_>, cfg: &ModelConfig, f_in: Var) -> Result<Var> {
    let geo = Conv2dGeometry::causal(cfg.cm_conv_kernel, cfg.cm_conv_stride);
    let h = g.conv("cm_mask.conv1", f_in, geo)?;
    let h = g.tape.relu(h);
    let h = g.conv("cm_mask.conv2", h, geo)?;
    Ok(g.tape.sigmoid(h))
}

/// `1 - m`, elementwise.
pub fn complement_mask(tape: &mut Tape, m: Var) -> Var {
    let n = tape.neg(m);
    tape.add_scalar(n, 1.0)
}

/// Plain-tensor complement, for inspection.
pub fn complement(m: &Tensor) -> Tensor {
    m.map(|v| 1.0 - v)
}

/// Per-frame weighted sum `w_tp F_tp + w_tn F_tn`, with weights from two
/// recurrent scorers over the channel-and-frequency mean of `F_tp + F_tn`.
/// Returns `(output, w_tp, w_tn)`; weights are `[1, T, 1]`.
pub fn interactive_block(g: &mut Graph<'_>, f_tp: Var, f_tn: Var) -> Result<(Var, Var, Var)> {
    let (_, t, _) = g.dims3(f_tp)?;
    let merged = g.tape.add(f_tp, f_tn)?;
    let pooled = g.tape.mean_pool(merged, &[0, 2])?;
    let pooled = g.tape.reshape(pooled, &[t, 1])?;
    let s1 = gru_score(g, "gru_tp", pooled)?;
    let s2 = gru_score(g, "gru_tn", pooled)?;
    let logits = g.tape.concat(&[s1, s2], 1)?;
    let w = g.tape.softmax(logits, 1)?;
    let w_tp = g.tape.slice(w, 1, 0, 1)?;
    let w_tp = g.tape.reshape(w_tp, &[1, t, 1])?;
    let w_tn = g.tape.slice(w, 1, 1, 1)?;
    let w_tn = g.tape.reshape(w_tn, &[1, t, 1])?;
    let a = g.tape.mul(w_tp, f_tp)?;
    let b = g.tape.mul(w_tn, f_tn)?;
    Ok((g.tape.add(a, b)?, w_tp, w_tn))
}

/// GRU states averaged over hidden units: one score per frame, `[T, 1]`.
fn gru_score(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = gru_forward(g, prefix, x)?;
    let t = g.tape.shape(h)[0];
    if g.tape.shape(h)[1] == 1 {
        return Ok(h);
    }
    let m = g.tape.mean_pool(h, &[1])?;
    g.tape.reshape(m, &[t, 1])
}

/// Runs the module selected by `cfg.toggles`, or the substitute attention
/// stack when every branch is off.
pub fn cm_forward(g: &mut Graph<'_>, cfg: &ModelConfig, f_in: Var) -> Result<(Var, CmTrace)> {
    cfg.toggles.validate()?;
    let tg = cfg.toggles;
    let mut trace = CmTrace::default();
    if tg.is_substitute() {
        let (h, t1) = fc_block(g, "att1", f_in, None)?;
        let (out, t2) = fc_block(g, "att2", h, None)?;
        trace.fc = vec![t1, t2];
        trace.fc_invocations = 2;
        return Ok((out, trace));
    }

    let m_tp = conv_block_mask(g, cfg, f_in)?;
    let m_tn = complement_mask(g.tape, m_tp);
    trace.m_tp = Some(m_tp);
    trace.m_tn = Some(m_tn);
    if tg.tpb {
        let (f, t) = fc_block(g, "fc_tp", f_in, Some(m_tp))?;
        trace.f_tp = Some(f);
        trace.fc.push(t);
    }
    if tg.tnb {
        let (f, t) = fc_block(g, "fc_tn", f_in, Some(m_tn))?;
        trace.f_tn = Some(f);
        trace.fc.push(t);
    }
    trace.fc_invocations = trace.fc.len();
    let out = match (trace.f_tp, trace.f_tn) {
        (Some(a), Some(b)) if tg.ib => {
            let (out, w_tp, w_tn) = interactive_block(g, a, b)?;
            trace.w_tp = Some(w_tp);
            trace.w_tn = Some(w_tn);
            out
        }
        (Some(a), Some(b)) => g.tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("validated toggles enable at least one branch"),
    };
    Ok((out, trace))
}

/// Declares the parameters of the module selected by `cfg.toggles`.
pub(crate) fn declare(init: &mut Init<'_>, cfg: &ModelConfig, bins: usize) -> Result<()> {
    let c = cfg.bottleneck_channels();
    let d_in = c * bins;
    let d = cfg.attention_dim;
    let fc = |init: &mut Init<'_>, p: &str| -> Result<()> {
        init.linear(&format!("{p}.key"), d_in, d)?;
        init.linear(&format!("{p}.value"), d_in, d)?;
        init.linear(&format!("{p}.query"), d_in, d)?;
        init.linear(&format!("{p}.out"), d, d_in)
    };
    let tg = cfg.toggles;
    if tg.is_substitute() {
        fc(init, "att1")?;
        return fc(init, "att2");
    }
    init.conv("cm_mask.conv1", c, c, cfg.cm_conv_kernel)?;
    init.conv("cm_mask.conv2", c, c, cfg.cm_conv_kernel)?;
    if tg.tpb {
        fc(init, "fc_tp")?;
    }
    if tg.tnb {
        fc(init, "fc_tn")?;
    }
    if tg.ib {
        init.gru("gru_tp", 1, cfg.gru_hidden)?;
        init.gru("gru_tn", 1, cfg.gru_hidden)?;
    }
    Ok(())
}

/// Channel average of a `[C, T, F]` map as a `T x F` grid.
pub fn channel_average(m: &Tensor) -> Result<Tensor> {
    let [c, t, f] = *m.shape() else {
        return Err(Error::Shape(format!("expected [C, T, F], got {:?}", m.shape())));
    };
    let src = m.data();
    let grid = Tensor::from_fn(&[t, f], |k| (0..c).map(|ch| src[ch * t * f + k]).sum::<f64>() / c as f64);
    Ok(grid)
}

/// Writes a grid as comma-separated rows with 6 significant digits.
pub fn write_grid(path: &Path, grid: &Tensor) -> Result<()> {
    let [rows, cols] = *grid.shape() else {
        return Err(Error::Shape(format!("expected a 2-D grid, got {:?}", grid.shape())));
    };
    let mut text = String::with_capacity(rows * cols * 13);
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                text.push(',');
            }
            let _ = write!(text, "{:.5e}", grid.data()[r * cols + c]);
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the module on `f_in` in inference mode and writes the
/// channel-averaged `m_tp.csv` and `m_tn.csv` grids into `dir`.
pub fn dump_attention_maps(
    f_in: &Tensor,
    store: &ParameterStore,
    cfg: &ModelConfig,
    dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    if cfg.toggles.is_substitute() {
        return Err(Error::Config("the substitute attention stack has no masks to dump".into()));
    }
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store, Mode::Infer);
    let x = g.tape.constant(f_in.clone());
    let (_, trace) = cm_forward(&mut g, cfg, x)?;
    write_attention_maps(&tape, &trace, dir)
}

/// Writes the masks recorded in `trace`.
pub fn write_attention_maps(tape: &Tape, trace: &CmTrace, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    let (Some(tp), Some(tn)) = (trace.m_tp, trace.m_tn) else {
        return Err(Error::Config("no attention masks were recorded".into()));
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (p_tp, p_tn) = (dir.join("m_tp.csv"), dir.join("m_tn.csv"));
    write_grid(&p_tp, &channel_average(tape.value(tp))?)?;
    write_grid(&p_tn, &channel_average(tape.value(tn))?)?;
    Ok((p_tp, p_tn))
}
