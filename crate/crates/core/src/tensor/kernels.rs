//! Raw loops for the heavy primitives. Layout is always `[C, T, F]` for
//! feature maps; conv kernels are `[C_out, C_in, kT, kF]` and transposed
//! conv kernels `[C_in, C_out, kT, kF]`.

use crate::error::{shape_err, Result};

/// Geometry of a 2-D cross-correlation over `[C, T, F]` maps.
///
/// Time is padded on the past side only; frequency on both sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub pad_past: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv2dGeometry {
    /// Past-only time padding of `kT - 1` frames and symmetric `(kF - 1) / 2`
    /// frequency padding.
    pub fn causal(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            stride,
            pad_past: kernel.0 - 1,
            pad_left: (kernel.1 - 1) / 2,
            pad_right: (kernel.1 - 1) / 2,
        }
    }

    pub fn unpadded(stride: (usize, usize)) -> Self {
        Self {
            stride,
            pad_past: 0,
            pad_left: 0,
            pad_right: 0,
        }
    }

    pub fn output_extent(&self, t: usize, f: usize, kt: usize, kf: usize) -> Result<(usize, usize)> {
        let (st, sf) = self.stride;
        if st == 0 || sf == 0 {
            return Err(shape_err!("conv stride must be positive, got {:?}", self.stride));
        }
        let tp = t + self.pad_past;
        let fp = f + self.pad_left + self.pad_right;
        if kt > tp || kf > fp {
            return Err(shape_err!(
                "kernel ({kt},{kf}) exceeds padded input ({tp},{fp})"
            ));
        }
        Ok(((tp - kt) / st + 1, (fp - kf) / sf + 1))
    }
}

/// Geometry of a transposed convolution: the full scatter output is cropped
/// to `[crop_past, crop_past + out_t)` in time and
/// `[crop_left, crop_left + out_f)` in frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeometry {
    pub stride: (usize, usize),
    pub crop_past: usize,
    pub out_t: usize,
    pub crop_left: usize,
    pub out_f: usize,
}

impl ConvTransposeGeometry {
    /// Keeps the first `t_in` frames (drops the future overhang) and centres
    /// the frequency crop for a symmetric `(kF - 1) / 2` forward padding.
    pub fn causal(t_in: usize, kernel: (usize, usize), stride: (usize, usize), out_f: usize) -> Self {
        Self {
            stride,
            crop_past: 0,
            out_t: (t_in - 1) * stride.0 + 1,
            crop_left: (kernel.1 - 1) / 2,
            out_f,
        }
    }

    pub(crate) fn check(&self, t: usize, f: usize, kt: usize, kf: usize) -> Result<()> {
        let (st, sf) = self.stride;
        if st == 0 || sf == 0 || t == 0 || f == 0 {
            return Err(shape_err!("degenerate transposed conv input or stride"));
        }
        let full_t = (t - 1) * st + kt;
        let full_f = (f - 1) * sf + kf;
        if self.crop_past + self.out_t > full_t + st - 1 {
            return Err(shape_err!(
                "time extent {} after crop {} unreachable from {} input frames",
                self.out_t,
                self.crop_past,
                t
            ));
        }
        if self.crop_left + self.out_f > full_f + sf - 1 {
            return Err(shape_err!(
                "frequency extent {} after crop {} unreachable from {} input bins",
                self.out_f,
                self.crop_left,
                f
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub c: usize,
    pub t: usize,
    pub f: usize,
}

/// Range of `f` in `0..n_iter` with `f * stride + j - pad` in `0..n_other`,
/// plus the first mapped index.
#[inline]
fn valid_range(j: usize, pad: usize, stride: usize, n_iter: usize, n_other: usize) -> (usize, usize, usize) {
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let hi = if n_other + pad > j {
        ((n_other + pad - j - 1) / stride + 1).min(n_iter)
    } else {
        0
    };
    if lo >= hi {
        return (0, 0, 0);
    }
    (lo, hi, lo * stride + j - pad)
}

/// Scatter core shared by conv backward-input and transposed conv forward:
/// `dst[c, t*st + i - p, f*sf + j - l] += src[o, t, f] * w(o, c, i, j)`.
#[allow(clippy::too_many_arguments)]
fn scatter(
    src: &[f64],
    sd: Dims,
    dst: &mut [f64],
    dd: Dims,
    weight: impl Fn(usize, usize, usize, usize) -> f64,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let (kt, kf) = k;
    let (st, sf) = stride;
    for o in 0..sd.c {
        for c in 0..dd.c {
            for i in 0..kt {
                for j in 0..kf {
                    let w = weight(o, c, i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi, first) = valid_range(j, pad.1, sf, sd.f, dd.f);
                    if lo == hi {
                        continue;
                    }
                    for t in 0..sd.t {
                        let ti = (t * st + i) as isize - pad.0 as isize;
                        if ti < 0 || ti as usize >= dd.t {
                            continue;
                        }
                        let srow = &src[(o * sd.t + t) * sd.f..][lo..hi];
                        let drow = &mut dst[(c * dd.t + ti as usize) * dd.f..][..dd.f];
                        if sf == 1 {
                            for (d, &g) in drow[first..].iter_mut().zip(srow) {
                                *d += g * w;
                            }
                        } else {
                            for (d, &g) in drow[first..].iter_mut().step_by(sf).zip(srow) {
                                *d += g * w;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gather core: `dst[o, t, f] += Σ src[c, t*st + i - p, f*sf + j - l] * w(o, c, i, j)`.
#[allow(clippy::too_many_arguments)]
fn gather(
    src: &[f64],
    sd: Dims,
    dst: &mut [f64],
    dd: Dims,
    weight: impl Fn(usize, usize, usize, usize) -> f64,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let (kt, kf) = k;
    let (st, sf) = stride;
    for o in 0..dd.c {
        for c in 0..sd.c {
            for i in 0..kt {
                for j in 0..kf {
                    let w = weight(o, c, i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi, first) = valid_range(j, pad.1, sf, dd.f, sd.f);
                    if lo == hi {
                        continue;
                    }
                    for t in 0..dd.t {
                        let ti = (t * st + i) as isize - pad.0 as isize;
                        if ti < 0 || ti as usize >= sd.t {
                            continue;
                        }
                        let srow = &src[(c * sd.t + ti as usize) * sd.f..][..sd.f];
                        let drow = &mut dst[(o * dd.t + t) * dd.f..][lo..hi];
                        if sf == 1 {
                            for (d, s) in drow.iter_mut().zip(&srow[first..]) {
                                *d += s * w;
                            }
                        } else {
                            for (d, s) in drow.iter_mut().zip(srow[first..].iter().step_by(sf)) {
                                *d += s * w;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the weight gradient of a correlation:
/// `gw(o, c, i, j) += Σ_{t,f} out_grad[o, t, f] * input[c, t*st + i - p, f*sf + j - l]`.
#[allow(clippy::too_many_arguments)]
fn weight_grad(
    input: &[f64],
    id: Dims,
    out_grad: &[f64],
    od: Dims,
    mut acc: impl FnMut(usize, usize, usize, usize, f64),
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let (kt, kf) = k;
    let (st, sf) = stride;
    for o in 0..od.c {
        for c in 0..id.c {
            for i in 0..kt {
                for j in 0..kf {
                    let (lo, hi, first) = valid_range(j, pad.1, sf, od.f, id.f);
                    let mut s = 0.0;
                    for t in 0..od.t {
                        let ti = (t * st + i) as isize - pad.0 as isize;
                        if lo == hi || ti < 0 || ti as usize >= id.t {
                            continue;
                        }
                        let irow = &input[(c * id.t + ti as usize) * id.f..][..id.f];
                        let grow = &out_grad[(o * od.t + t) * od.f..][lo..hi];
                        if sf == 1 {
                            s += grow.iter().zip(&irow[first..]).map(|(g, x)| g * x).sum::<f64>();
                        } else {
                            s += grow
                                .iter()
                                .zip(irow[first..].iter().step_by(sf))
                                .map(|(g, x)| g * x)
                                .sum::<f64>();
                        }
                    }
                    acc(o, c, i, j, s);
                }
            }
        }
    }
}

pub(crate) struct ConvShapes {
    pub input: Dims,
    pub output: Dims,
    pub kernel: (usize, usize),
}

pub(crate) fn conv2d_shapes(input: &[usize], kernel: &[usize], geo: &Conv2dGeometry) -> Result<ConvShapes> {
    if input.len() != 3 || kernel.len() != 4 {
        return Err(shape_err!(
            "conv2d expects [C,T,F] input and [Co,Ci,kT,kF] kernel, got {:?} and {:?}",
            input,
            kernel
        ));
    }
    if kernel[1] != input[0] {
        return Err(shape_err!(
            "conv2d kernel expects {} input channels, input has {}",
            kernel[1],
            input[0]
        ));
    }
    let (ot, of) = geo.output_extent(input[1], input[2], kernel[2], kernel[3])?;
    Ok(ConvShapes {
        input: Dims { c: input[0], t: input[1], f: input[2] },
        output: Dims { c: kernel[0], t: ot, f: of },
        kernel: (kernel[2], kernel[3]),
    })
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    s: &ConvShapes,
    geo: &Conv2dGeometry,
) -> Vec<f64> {
    let ConvShapes { input: id, output: od, kernel: (kt, kf) } = *s;
    let mut out = vec![0.0; od.c * od.t * od.f];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(od.t * od.f).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let widx = |o: usize, c: usize, i: usize, j: usize| w[((o * id.c + c) * kt + i) * kf + j];
    gather(x, id, &mut out, od, widx, (kt, kf), geo.stride, (geo.pad_past, geo.pad_left));
    out
}

/// Returns (grad_input, grad_weight); bias gradient is the per-channel sum
/// of `gy` and is left to the caller.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    s: &ConvShapes,
    geo: &Conv2dGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ConvShapes { input: id, output: od, kernel: (kt, kf) } = *s;
    let pad = (geo.pad_past, geo.pad_left);
    let gx = need_input.then(|| {
        let mut gx = vec![0.0; id.c * id.t * id.f];
        let widx = |o: usize, c: usize, i: usize, j: usize| w[((o * id.c + c) * kt + i) * kf + j];
        scatter(gy, od, &mut gx, id, widx, (kt, kf), geo.stride, pad);
        gx
    });
    let gw = need_weight.then(|| {
        let mut gw = vec![0.0; w.len()];
        weight_grad(
            x,
            id,
            gy,
            od,
            |o, c, i, j, v| gw[((o * id.c + c) * kt + i) * kf + j] += v,
            (kt, kf),
            geo.stride,
            pad,
        );
        gw
    });
    (gx, gw)
}

pub(crate) fn conv_transpose_shapes(
    input: &[usize],
    kernel: &[usize],
    geo: &ConvTransposeGeometry,
) -> Result<ConvShapes> {
    if input.len() != 3 || kernel.len() != 4 {
        return Err(shape_err!(
            "conv_transpose2d expects [C,T,F] input and [Ci,Co,kT,kF] kernel, got {:?} and {:?}",
            input,
            kernel
        ));
    }
    if kernel[0] != input[0] {
        return Err(shape_err!(
            "transposed kernel expects {} input channels, input has {}",
            kernel[0],
            input[0]
        ));
    }
    geo.check(input[1], input[2], kernel[2], kernel[3])?;
    Ok(ConvShapes {
        input: Dims { c: input[0], t: input[1], f: input[2] },
        output: Dims { c: kernel[1], t: geo.out_t, f: geo.out_f },
        kernel: (kernel[2], kernel[3]),
    })
}

pub(crate) fn conv_transpose_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    s: &ConvShapes,
    geo: &ConvTransposeGeometry,
) -> Vec<f64> {
    let ConvShapes { input: id, output: od, kernel: (kt, kf) } = *s;
    let mut out = vec![0.0; od.c * od.t * od.f];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(od.t * od.f).enumerate() {
            chunk.fill(b[o]);
        }
    }
    // kernel [Ci, Co, kT, kF]: scatter source channel ci into output channel co
    let widx = |ci: usize, co: usize, i: usize, j: usize| w[((ci * od.c + co) * kt + i) * kf + j];
    scatter(x, id, &mut out, od, widx, (kt, kf), geo.stride, (geo.crop_past, geo.crop_left));
    out
}

pub(crate) fn conv_transpose_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    s: &ConvShapes,
    geo: &ConvTransposeGeometry,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ConvShapes { input: id, output: od, kernel: (kt, kf) } = *s;
    let pad = (geo.crop_past, geo.crop_left);
    let gx = need_input.then(|| {
        let mut gx = vec![0.0; id.c * id.t * id.f];
        let widx = |ci: usize, co: usize, i: usize, j: usize| w[((ci * od.c + co) * kt + i) * kf + j];
        gather(gy, od, &mut gx, id, widx, (kt, kf), geo.stride, pad);
        gx
    });
    let gw = need_weight.then(|| {
        let mut gw = vec![0.0; w.len()];
        // out[co, t*s+i-p, ...] += x[ci, t, ...] * w[ci, co, i, j]
        weight_grad(
            gy,
            od,
            x,
            id,
            |ci, co, i, j, v| gw[((ci * od.c + co) * kt + i) * kf + j] += v,
            (kt, kf),
            geo.stride,
            pad,
        );
        gw
    });
    (gx, gw)
}

/// `c[m, n] += Σ_k a[m, k] * b[k, n]` with optional transposition of either
/// operand (`ta`: a is stored `[K, M]`; `tb`: b is stored `[N, K]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}
