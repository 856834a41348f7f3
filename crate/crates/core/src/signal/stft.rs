use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};

/// Analysis/synthesis configuration: periodic Hamming window, 50% overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 512,
            hop: 256,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Zeros prepended before framing; every sample then lies in exactly
    /// `window_length / hop` frames.
    pub fn front_pad(&self) -> usize {
        self.window_length - self.hop
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        (samples + self.front_pad() - 1) / self.hop + 1
    }

    /// Periodic Hamming window, strictly positive.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_length != 2 * self.hop || self.fft_size < self.window_length {
            return Err(Error::Config(format!("unsupported STFT configuration {self:?}")));
        }
        Ok(())
    }
}

/// `T x F` complex spectrogram stored as separate real/imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub config: StftConfig,
    /// Length of the waveform this spectrogram was computed from.
    pub num_samples: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, config: StftConfig, num_samples: usize) -> Self {
        let bins = config.bins();
        Self {
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
            config,
            num_samples,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }

    pub fn energy(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }
}

/// Reusable forward/inverse transform pair.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window(),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        let cfg = self.config;
        let x = w.samples();
        if x.len() < cfg.window_length {
            return Err(Error::Contract(format!(
                "signal of {} samples is shorter than the {}-sample window",
                x.len(),
                cfg.window_length
            )));
        }
        let frames = cfg.frames_for(x.len());
        let pad = cfg.front_pad();
        let mut spec = ComplexSpectrogram::zeros(frames, cfg, x.len());
        let bins = spec.bins;
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..frames {
            buf.fill(Complex64::new(0.0, 0.0));
            for (n, (b, &win)) in buf.iter_mut().zip(&self.window).enumerate() {
                let p = t * cfg.hop + n;
                if p >= pad && p - pad < x.len() {
                    b.re = x[p - pad] * win;
                }
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                spec.re[t * bins + k] = buf[k].re;
                spec.im[t * bins + k] = buf[k].im;
            }
        }
        Ok(spec)
    }

    /// Real inverse of one half-spectrum frame; imaginary parts at DC and
    /// Nyquist are ignored.
    fn inverse_frame(&self, re: &[f64], im: &[f64], buf: &mut [Complex64]) {
        let n = self.config.fft_size;
        let half = n / 2;
        buf[0] = Complex64::new(re[0], 0.0);
        buf[half] = Complex64::new(re[half], 0.0);
        for k in 1..half {
            buf[k] = Complex64::new(re[k], im[k]);
            buf[n - k] = Complex64::new(re[k], -im[k]);
        }
        self.inverse.process(buf);
        let scale = 1.0 / n as f64;
        for b in buf.iter_mut() {
            b.re *= scale;
        }
    }

    /// Summed squared synthesis window over the padded timeline.
    fn envelope(&self, frames: usize) -> Vec<f64> {
        let cfg = self.config;
        let mut env = vec![0.0; (frames - 1) * cfg.hop + cfg.window_length];
        for t in 0..frames {
            for (n, w) in self.window.iter().enumerate() {
                env[t * cfg.hop + n] += w * w;
            }
        }
        env
    }

    /// Weighted overlap-add with the analysis window, normalised by the
    /// squared-window envelope.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        let cfg = self.config;
        if spec.config != cfg || spec.bins != cfg.bins() {
            return Err(Error::Contract("spectrogram does not match STFT configuration".into()));
        }
        if spec.frames == 0 {
            return Waveform::new(vec![0.0; spec.num_samples]);
        }
        let bins = spec.bins;
        let mut acc = vec![0.0; (spec.frames - 1) * cfg.hop + cfg.window_length];
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
        for t in 0..spec.frames {
            self.inverse_frame(&spec.re[t * bins..(t + 1) * bins], &spec.im[t * bins..(t + 1) * bins], &mut buf);
            for (n, w) in self.window.iter().enumerate() {
                acc[t * cfg.hop + n] += buf[n].re * w;
            }
        }
        let env = self.envelope(spec.frames);
        let pad = cfg.front_pad();
        let samples = (0..spec.num_samples)
            .map(|n| {
                let p = n + pad;
                if p < acc.len() && env[p] > 1e-12 {
                    acc[p] / env[p]
                } else {
                    0.0
                }
            })
            .collect();
        Waveform::new(samples)
    }

    /// Adjoint of [`synthesize`](Self::synthesize): maps a gradient on the
    /// output samples to gradients on the real and imaginary planes.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> (Vec<f64>, Vec<f64>) {
        let cfg = self.config;
        let bins = cfg.bins();
        let n = cfg.fft_size;
        let half = n / 2;
        let env = self.envelope(frames.max(1));
        let pad = cfg.front_pad();
        let mut padded = vec![0.0; env.len()];
        for (i, g) in grad.iter().enumerate() {
            let p = i + pad;
            if p < env.len() && env[p] > 1e-12 {
                padded[p] = g / env[p];
            }
        }
        let mut gre = vec![0.0; frames * bins];
        let mut gim = vec![0.0; frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            buf.fill(Complex64::new(0.0, 0.0));
            for (j, w) in self.window.iter().enumerate() {
                buf[j].re = padded[t * cfg.hop + j] * w;
            }
            self.forward.process(&mut buf);
            let scale = 1.0 / n as f64;
            for k in 0..bins {
                let c = if k == 0 || k == half { 1.0 } else { 2.0 };
                gre[t * bins + k] = c * scale * buf[k].re;
                gim[t * bins + k] = if k == 0 || k == half { 0.0 } else { c * scale * buf[k].im };
            }
        }
        (gre, gim)
    }
}

pub fn stft(w: &Waveform, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(cfg)?.analyze(w)
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    Stft::new(spec.config)?.synthesize(spec)
}
