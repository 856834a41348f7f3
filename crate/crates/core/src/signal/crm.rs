use super::ComplexSpectrogram;
use crate::error::{Error, Result};

pub const CRM_DENOM_FLOOR: f64 = 1e-10;
pub const CRM_CLIP: f64 = 10.0;

/// Complex ratio mask `M = M_r + j M_i` over a `T x F` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CRMask {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl CRMask {
    pub fn new(frames: usize, bins: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != frames * bins || im.len() != frames * bins {
            return Err(Error::Shape(format!(
                "mask planes must hold {} values",
                frames * bins
            )));
        }
        Ok(Self { frames, bins, re, im })
    }

    pub fn constant(frames: usize, bins: usize, re: f64, im: f64) -> Self {
        let n = frames * bins;
        Self {
            frames,
            bins,
            re: vec![re; n],
            im: vec![im; n],
        }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Phase in `(-π, π]`.
    pub fn phase(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| {
                let p = i.atan2(*r);
                if p == -std::f64::consts::PI {
                    std::f64::consts::PI
                } else {
                    p
                }
            })
            .collect()
    }

    pub fn from_polar(frames: usize, bins: usize, mag: &[f64], phase: &[f64]) -> Result<Self> {
        let (re, im) = mag
            .iter()
            .zip(phase)
            .map(|(m, p)| (m * p.cos(), m * p.sin()))
            .unzip();
        Self::new(frames, bins, re, im)
    }
}

/// Ideal complex ratio mask `S / Y`, with the denominator floored and the
/// magnitude clipped to [`CRM_CLIP`].
pub fn crm_compute(y: &ComplexSpectrogram, s: &ComplexSpectrogram) -> Result<CRMask> {
    if !y.same_shape(s) {
        return Err(Error::Shape("CRM operands differ in shape".into()));
    }
    let n = y.re.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let (yr, yi, sr, si) = (y.re[k], y.im[k], s.re[k], s.im[k]);
        let den = (yr * yr + yi * yi).max(CRM_DENOM_FLOOR);
        let (mut mr, mut mi) = ((yr * sr + yi * si) / den, (yr * si - yi * sr) / den);
        let mag = mr.hypot(mi);
        if mag > CRM_CLIP {
            mr *= CRM_CLIP / mag;
            mi *= CRM_CLIP / mag;
        }
        re[k] = mr;
        im[k] = mi;
    }
    CRMask::new(y.frames, y.bins, re, im)
}

/// Polar-form mask application: magnitudes multiply, phases add.
pub fn crm_apply(y: &ComplexSpectrogram, m: &CRMask) -> Result<ComplexSpectrogram> {
    if y.frames != m.frames || y.bins != m.bins {
        return Err(Error::Shape("mask and spectrogram differ in shape".into()));
    }
    let (mm, mp) = (m.magnitude(), m.phase());
    let mut out = y.clone();
    for k in 0..y.re.len() {
        let ymag = y.re[k].hypot(y.im[k]);
        let yph = y.im[k].atan2(y.re[k]);
        let mag = ymag * mm[k];
        let ph = yph + mp[k];
        out.re[k] = mag * ph.cos();
        out.im[k] = mag * ph.sin();
    }
    Ok(out)
}

/// Rectangular complex product `Y * M`; the same map as [`crm_apply`].
pub fn complex_product(y: &ComplexSpectrogram, m: &CRMask) -> Result<ComplexSpectrogram> {
    if y.frames != m.frames || y.bins != m.bins {
        return Err(Error::Shape("mask and spectrogram differ in shape".into()));
    }
    let mut out = y.clone();
    for k in 0..y.re.len() {
        out.re[k] = y.re[k] * m.re[k] - y.im[k] * m.im[k];
        out.im[k] = y.re[k] * m.im[k] + y.im[k] * m.re[k];
    }
    Ok(out)
}
