use crate::error::{Error, Result};
use crate::model::Graph;
use crate::tensor::{causal_mask, Var};

/// Tape handles of one feature-catcher evaluation. Frame-major layout:
/// `key`, `value`, `global`, `query` are `[T, d]`; attention maps `[T, T]`.
#[derive(Clone, Debug)]
pub struct FcTrace {
    pub name: String,
    pub key: Var,
    pub value: Var,
    pub x_attn: Var,
    pub global: Var,
    pub query: Var,
    pub y_attn: Var,
    pub output: Var,
}

/// `[C, T, F]` to `[T, C*F]`.
pub(crate) fn fold(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let (c, t, f) = g.dims3(x)?;
    let p = g.tape.permute(x, &[1, 0, 2])?;
    g.tape.reshape(p, &[t, c * f])
}

fn unfold(g: &mut Graph<'_>, x: Var, c: usize, t: usize, f: usize) -> Result<Var> {
    let r = g.tape.reshape(x, &[t, c, f])?;
    g.tape.permute(r, &[1, 0, 2])
}

/// Causally masked `softmax(a bᵀ / √d)` over the last axis.
fn causal_attention(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let (t, d) = (g.tape.shape(a)[0], g.tape.shape(a)[1]);
    let bt = g.tape.transpose(b)?;
    let s = g.tape.matmul(a, bt)?;
    let s = g.tape.scale(s, 1.0 / (d as f64).sqrt());
    g.tape.masked_softmax(s, 1, Some(&causal_mask(t)))
}

/// Feature catcher over time with frequency folded into the feature axis.
///
/// `K = fold(F) Wk`, `V = fold(F) Wv`, `X = softmax(K Vᵀ)`, `G = X V`,
/// `Q = fold(M ⊙ F) Wq`, `Y = softmax(Q Gᵀ)`, output `unfold(Y G Wo) + F`.
/// Both softmaxes are causally masked and scaled by `1/√d`. Without a mask
/// the query is taken from `F` directly.
pub fn fc_block(g: &mut Graph<'_>, prefix: &str, f_in: Var, mask: Option<Var>) -> Result<(Var, FcTrace)> {
    let (c, t, f) = g.dims3(f_in)?;
    let folded = fold(g, f_in)?;
    let key = g.linear(&format!("{prefix}.key"), folded)?;
    let value = g.linear(&format!("{prefix}.value"), folded)?;
    let x_attn = causal_attention(g, key, value)?;
    let global = g.tape.matmul(x_attn, value)?;

    let q_src = match mask {
        Some(m) => {
            if g.tape.shape(m) != g.tape.shape(f_in) {
                return Err(Error::Contract(format!(
                    "feature-catcher mask {:?} does not match input {:?}",
                    g.tape.shape(m),
                    g.tape.shape(f_in)
                )));
            }
            let gated = g.tape.mul(m, f_in)?;
            fold(g, gated)?
        }
        None => folded,
    };
    let query = g.linear(&format!("{prefix}.query"), q_src)?;
    let y_attn = causal_attention(g, query, global)?;
    let mixed = g.tape.matmul(y_attn, global)?;
    let proj = g.linear(&format!("{prefix}.out"), mixed)?;
    let back = unfold(g, proj, c, t, f)?;
    let output = g.tape.add(back, f_in)?;
    let trace = FcTrace {
        name: prefix.to_string(),
        key,
        value,
        x_attn,
        global,
        query,
        y_attn,
        output,
    };
    Ok((output, trace))
}
