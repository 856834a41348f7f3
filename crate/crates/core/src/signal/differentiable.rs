//! Tape-recorded versions of the signal steps used inside the training loss:
//! mask application, inverse STFT and SI-SNR.

use std::sync::Arc;

use super::metrics::SI_SNR_EPS;
use super::stft::{ComplexSpectrogram, Stft};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Applies a complex mask given as two `[T, F]` planes to a fixed mixture
/// spectrogram. Uses the rectangular product, which equals the polar form
/// of [`crm_apply`](super::crm_apply) and stays differentiable at zero.
pub fn apply_mask(tape: &mut Tape, y: &ComplexSpectrogram, mask_re: Var, mask_im: Var) -> Result<(Var, Var)> {
    let shape = [y.frames, y.bins];
    if tape.shape(mask_re) != shape || tape.shape(mask_im) != shape {
        return Err(Error::Shape(format!(
            "mask planes {:?}/{:?} do not match spectrogram {:?}",
            tape.shape(mask_re),
            tape.shape(mask_im),
            shape
        )));
    }
    let yr = tape.constant(Tensor::new(&shape, y.re.clone())?);
    let yi = tape.constant(Tensor::new(&shape, y.im.clone())?);
    let a = tape.mul(yr, mask_re)?;
    let b = tape.mul(yi, mask_im)?;
    let re = tape.sub(a, b)?;
    let c = tape.mul(yr, mask_im)?;
    let d = tape.mul(yi, mask_re)?;
    let im = tape.add(c, d)?;
    Ok((re, im))
}

struct IstftOp {
    stft: Arc<Stft>,
    frames: usize,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &str {
        "istft"
    }

    fn backward(&self, grad: &Tensor, _inputs: &[&Tensor], _output: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (gre, gim) = self.stft.synthesize_adjoint(grad.data(), self.frames);
        let bins = self.stft.config().bins();
        let shape = [self.frames, bins];
        vec![
            needs[0].then(|| Tensor::new(&shape, gre).expect("adjoint shape")),
            needs[1].then(|| Tensor::new(&shape, gim).expect("adjoint shape")),
        ]
    }
}

/// Inverse STFT of `[T, F]` real/imaginary planes back to `num_samples`
/// samples, recorded as a linear operation.
pub fn istft_var(tape: &mut Tape, stft: &Arc<Stft>, re: Var, im: Var, num_samples: usize) -> Result<Var> {
    let cfg = stft.config();
    let shape = tape.shape(re).to_vec();
    if shape.len() != 2 || shape[1] != cfg.bins() || tape.shape(im) != shape {
        return Err(Error::Shape(format!("istft planes must be [T, {}], got {:?}", cfg.bins(), shape)));
    }
    let spec = ComplexSpectrogram {
        frames: shape[0],
        bins: shape[1],
        re: tape.value(re).data().to_vec(),
        im: tape.value(im).data().to_vec(),
        config: cfg,
        num_samples,
    };
    let wave = stft.synthesize(&spec)?;
    let out = Tensor::from_vec(wave.into_samples());
    Ok(tape.custom(
        &[re, im],
        out,
        Box::new(IstftOp {
            stft: Arc::clone(stft),
            frames: shape[0],
        }),
    ))
}

/// SI-SNR in dB of `est` against a fixed reference, without the output cap.
pub fn si_snr_var(tape: &mut Tape, est: Var, reference: &[f64]) -> Result<Var> {
    if tape.shape(est) != [reference.len()] {
        return Err(Error::Contract(format!(
            "SI-SNR estimate {:?} vs reference of {} samples",
            tape.shape(est),
            reference.len()
        )));
    }
    let energy: f64 = reference.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::Contract("SI-SNR reference is all zeros".into()));
    }
    let s = tape.constant(Tensor::from_vec(reference.to_vec()));
    let proj = tape.dot(est, s)?;
    let alpha = tape.scale(proj, 1.0 / energy);
    let target = tape.mul(alpha, s)?;
    let noise = tape.sub(est, target)?;
    let tt = tape.dot(target, target)?;
    let nn = tape.dot(noise, noise)?;
    let tt = floor_scalar(tape, tt, SI_SNR_EPS);
    let nn = floor_scalar(tape, nn, SI_SNR_EPS);
    let lt = tape.log(tt);
    let ln = tape.log(nn);
    let diff = tape.sub(lt, ln)?;
    Ok(tape.scale(diff, 10.0 / std::f64::consts::LN_10))
}

/// `max(v, floor)` for a scalar node: below the floor the result is a
/// constant with zero gradient.
pub fn floor_scalar(tape: &mut Tape, v: Var, floor: f64) -> Var {
    if tape.value(v).data()[0] >= floor {
        v
    } else {
        tape.constant(Tensor::from_vec(vec![floor]))
    }
}
