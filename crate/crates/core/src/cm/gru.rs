use crate::error::{shape_err, Result};
use crate::model::Graph;
use crate::tensor::{Tensor, Var};

/// Unidirectional GRU over `x: [T, I]` from a zero state, returning every
/// hidden state as `[T, H]`.
///
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `n = tanh(Wn x + Un (r ⊙ h) + bn)`, `h' = (1 - z) ⊙ h + z ⊙ n`.
pub fn gru_forward(g: &mut Graph<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.p(&format!("{prefix}.w"))?;
    let u = g.p(&format!("{prefix}.u"))?;
    let b = g.p(&format!("{prefix}.b"))?;
    let h_dim = g.tape.shape(u)[1];
    let [t_len, i_dim] = *g.tape.shape(x) else {
        return Err(shape_err!("GRU input must be [T, I], got {:?}", g.tape.shape(x)));
    };
    if g.tape.shape(w) != [3 * h_dim, i_dim] {
        return Err(shape_err!("GRU input weights {:?} vs input width {}", g.tape.shape(w), i_dim));
    }

    let wt = g.tape.transpose(w)?;
    let xw = g.tape.matmul(x, wt)?;
    let xw = g.tape.add(xw, b)?;
    let u_zr = g.tape.slice(u, 0, 0, 2 * h_dim)?;
    let u_zr = g.tape.transpose(u_zr)?;
    let u_n = g.tape.slice(u, 0, 2 * h_dim, h_dim)?;
    let u_n = g.tape.transpose(u_n)?;

    let mut h = g.tape.constant(Tensor::zeros(&[1, h_dim]));
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = g.tape.slice(xw, 0, t, 1)?;
        let x_zr = g.tape.slice(xt, 1, 0, 2 * h_dim)?;
        let x_n = g.tape.slice(xt, 1, 2 * h_dim, h_dim)?;
        let hu = g.tape.matmul(h, u_zr)?;
        let pre = g.tape.add(x_zr, hu)?;
        let zr = g.tape.sigmoid(pre);
        let z = g.tape.slice(zr, 1, 0, h_dim)?;
        let r = g.tape.slice(zr, 1, h_dim, h_dim)?;
        let rh = g.tape.mul(r, h)?;
        let rhu = g.tape.matmul(rh, u_n)?;
        let pre_n = g.tape.add(x_n, rhu)?;
        let n = g.tape.tanh(pre_n);
        let delta = g.tape.sub(n, h)?;
        let step = g.tape.mul(z, delta)?;
        h = g.tape.add(h, step)?;
        states.push(h);
    }
    g.tape.concat(&states, 0)
}
