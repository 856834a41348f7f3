//! Central finite-difference verification of tape gradients.

use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default finite-difference step for 64-bit data.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged by absolute error against this scale.
    pub floor: f64,
    /// Check only these flat indices; all when `None`.
    pub indices: Option<Vec<usize>>,
    /// Multiple of `ε_mach |f| / step` treated as finite-difference rounding
    /// noise; differences below it are not resolvable.
    pub noise_factor: f64,
    /// Skip entries whose `±step` probes land on different linear pieces of
    /// a ReLU/PReLU, where the function is not differentiable.
    pub skip_kinks: bool,
    /// Evaluate every probe on the base pass's ReLU/PReLU sign pattern, so
    /// no probe crosses a kink; takes precedence over `skip_kinks`.
    pub freeze_kinks: bool,
    /// Fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`
    /// instead of the second-order central difference.
    pub five_point: bool,
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            step: FD_STEP,
            tol,
            floor: 1e-6,
            indices: None,
            noise_factor: 32.0,
            skip_kinks: true,
            freeze_kinks: false,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub tol: f64,
    /// Entries skipped because a probe crossed a kink.
    pub kink_skips: usize,
    /// Largest rounding-noise bound applied.
    pub noise_bound: f64,
    pub passed: bool,
}

/// Relative error as reported by the checker; `floor` bounds the
/// denominator from below.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward()` gradients of the scalar function `f` at `x` with
/// central finite differences.
pub fn finite_difference_check<F>(f: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    scalar(&tape, out)?;
    let base_sig = tape.kink_signature();
    let pattern = opts.freeze_kinks.then(|| tape.kink_pattern());
    let analytic = tape.backward(out)?.get_or_zeros(xv);

    let eval = |t: &Tensor| -> Result<(f64, u64)> {
        let mut tape = match &pattern {
            Some(p) => Tape::with_frozen_kinks(p.clone()),
            None => Tape::new(),
        };
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let sig = match pattern {
            Some(_) => base_sig,
            None => tape.kink_signature(),
        };
        Ok((scalar(&tape, out)?, sig))
    };

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..x.len()).collect(),
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        tol: opts.tol,
        kink_skips: 0,
        noise_bound: 0.0,
        passed: true,
    };
    let mut probe = x.clone();
    let offsets: &[(f64, f64)] = match opts.five_point {
        true => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
        false => &[(1.0, 0.5), (-1.0, -0.5)],
    };
    let coef_sum: f64 = offsets.iter().map(|o| o.1.abs()).sum();
    for &i in &indices {
        let orig = probe.data()[i];
        let mut numeric = 0.0;
        let mut f_max = 0.0f64;
        let mut kink = false;
        for &(k, c) in offsets {
            probe.data_mut()[i] = orig + k * opts.step;
            let (v, sig) = eval(&probe)?;
            numeric += c * v;
            f_max = f_max.max(v.abs());
            kink |= sig != base_sig;
        }
        probe.data_mut()[i] = orig;
        if opts.skip_kinks && kink {
            report.kink_skips += 1;
            continue;
        }
        let numeric = numeric / opts.step;
        let noise = opts.noise_factor * f64::EPSILON * f_max * coef_sum / opts.step;
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric, opts.floor.max(noise / opts.tol));
        report.checked += 1;
        report.noise_bound = report.noise_bound.max(noise);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err.is_finite() && report.max_rel_err < opts.tol;
    Ok(report)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
