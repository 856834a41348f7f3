//! Seeded scenario generation: pseudo-speech, echo paths, noise, and the
//! additive mixture `y = d + s + v`.

mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{
    apply_nonlinearity, convolve_truncated, echo_with_rir, room_impulse_response, synth_echo, synth_noise,
    synth_speechlike, CLIP_FRACTION, MIN_SPEECH_S, RIR_TAIL_GAIN, SPEECH_PEAK,
};

use crate::error::{Error, Result};
use crate::signal::{gcc_phat_align, scale_to_ratio, Alignment, RatioKind, Waveform, DEFAULT_MAX_DELAY_S};

pub const SER_RANGE_DB: (f64, f64) = (-15.0, 15.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Double talk: near-end speech and echo.
    #[serde(rename = "DT")]
    DoubleTalk,
    /// Near-end single talk: the far end is silent.
    #[serde(rename = "ST_NE")]
    NearEnd,
    /// Far-end single talk: no near-end speech.
    #[serde(rename = "ST_FE")]
    FarEnd,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::DoubleTalk, Self::NearEnd, Self::FarEnd];

    pub fn label(self) -> &'static str {
        match self {
            Self::DoubleTalk => "DT",
            Self::NearEnd => "ST_NE",
            Self::FarEnd => "ST_FE",
        }
    }

    pub fn has_near_end(self) -> bool {
        self != Self::FarEnd
    }

    pub fn has_echo(self) -> bool {
        self != Self::NearEnd
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    None,
    HardClip,
    Arctan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    LowPass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoPath {
    pub rir_length_s: f64,
    /// Amplitude decay per second of the impulse-response tail.
    pub decay_rate: f64,
    pub nonlinearity: Nonlinearity,
    /// Samples of pure delay before the direct path.
    pub bulk_delay: usize,
}

impl Default for EchoPath {
    fn default() -> Self {
        Self {
            rir_length_s: 0.05,
            decay_rate: 60.0,
            nonlinearity: Nonlinearity::None,
            bulk_delay: 160,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Near-end to echo ratio; double talk only.
    pub ser_db: Option<f64>,
    /// Reference to noise ratio; `None` means no noise.
    pub snr_db: Option<f64>,
    pub noise: NoiseKind,
    pub duration_s: f64,
    pub echo: EchoPath,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn double_talk(ser_db: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::DoubleTalk,
            ser_db: Some(ser_db),
            snr_db: None,
            noise: NoiseKind::White,
            duration_s,
            echo: EchoPath::default(),
            seed,
        }
    }

    pub fn near_end(duration_s: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::NearEnd,
            ser_db: None,
            ..Self::double_talk(0.0, duration_s, seed)
        }
    }

    pub fn far_end(duration_s: f64, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::FarEnd,
            ser_db: None,
            ..Self::double_talk(0.0, duration_s, seed)
        }
    }

    pub fn with_snr(mut self, snr_db: Option<f64>, noise: NoiseKind) -> Self {
        self.snr_db = snr_db;
        self.noise = noise;
        self
    }

    pub fn with_echo(mut self, echo: EchoPath) -> Self {
        self.echo = echo;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match (self.kind, self.ser_db) {
            (ScenarioKind::DoubleTalk, None) => return bad("double talk needs an SER".into()),
            (ScenarioKind::DoubleTalk, Some(s)) if !(SER_RANGE_DB.0..=SER_RANGE_DB.1).contains(&s) => {
                return bad(format!("SER {s} dB outside [{}, {}]", SER_RANGE_DB.0, SER_RANGE_DB.1))
            }
            (k @ (ScenarioKind::NearEnd | ScenarioKind::FarEnd), Some(_)) => {
                return bad(format!("{k} has no echo-to-speech ratio, but an SER was given"))
            }
            _ => {}
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return bad(format!("SNR must be finite, got {snr}"));
            }
        }
        if !(self.duration_s >= MIN_SPEECH_S) || !self.duration_s.is_finite() {
            return bad(format!("duration must be at least {MIN_SPEECH_S} s, got {}", self.duration_s));
        }
        let e = &self.echo;
        if !(e.rir_length_s > 0.0) || !e.rir_length_s.is_finite() || !(e.decay_rate >= 0.0) {
            return bad(format!("invalid echo path {e:?}"));
        }
        if e.bulk_delay as f64 >= DEFAULT_MAX_DELAY_S * crate::signal::SAMPLE_RATE as f64 {
            return bad(format!("bulk delay {} exceeds the alignment search window", e.bulk_delay));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * crate::signal::SAMPLE_RATE as f64).round() as usize
    }
}

/// Every component of one generated scenario. `y` is the sample-wise sum
/// `(d + s) + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub spec: ScenarioSpec,
    pub y: Waveform,
    pub s: Waveform,
    /// Far-end reference as played, before alignment.
    pub x: Waveform,
    pub d: Waveform,
    pub v: Waveform,
}

impl Mixture {
    /// Far-end reference aligned to the microphone signal.
    pub fn align(&self) -> Result<Alignment> {
        gcc_phat_align(&self.y, &self.x, DEFAULT_MAX_DELAY_S)
    }
}

/// `splitmix64` of `base` mixed with `stream`; independent sub-seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the scenario described by `spec`; a pure function of `spec`.
pub fn mix_scenario(spec: &ScenarioSpec) -> Result<Mixture> {
    spec.validate()?;
    let n = spec.num_samples();
    let seed = |k| derive_seed(spec.seed, k);
    let silent = Waveform::zeros(n);

    let s = match spec.kind.has_near_end() {
        true => synth_speechlike(spec.duration_s, seed(1))?,
        false => silent.clone(),
    };
    let (x, d) = match spec.kind {
        ScenarioKind::NearEnd => (silent.clone(), silent.clone()),
        _ => {
            let x = synth_speechlike(spec.duration_s, seed(2))?;
            let d = synth_echo(&x, &spec.echo, seed(3))?;
            let d = match spec.ser_db {
                Some(ser) => scale_to_ratio(&d, &s, ser, RatioKind::Ser)?,
                None => d,
            };
            (x, d)
        }
    };
    let v = match spec.snr_db {
        Some(snr) => {
            let reference = if spec.kind.has_near_end() { &s } else { &d };
            let raw = synth_noise(n, spec.noise, seed(4))?;
            scale_to_ratio(&raw, reference, snr, RatioKind::Snr)?
        }
        None => silent,
    };
    let y: Vec<f64> = d
        .samples()
        .iter()
        .zip(s.samples())
        .zip(v.samples())
        .map(|((a, b), c)| a + b + c)
        .collect();
    Ok(Mixture {
        spec: *spec,
        y: Waveform::new(y)?,
        s,
        x,
        d,
        v,
    })
}

/// Random scenario family used for training and evaluation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioDistribution {
    /// Drawn uniformly per scenario.
    pub kinds: Vec<ScenarioKind>,
    /// Double-talk SER drawn uniformly from this interval.
    pub ser_db: [f64; 2],
    pub snr_db: f64,
    /// Probability that a scenario carries noise at `snr_db`.
    pub noise_probability: f64,
    pub noise: Vec<NoiseKind>,
    pub rir_length_s: f64,
    pub decay_rate: f64,
    pub nonlinearities: Vec<Nonlinearity>,
    /// Bulk echo delay drawn uniformly from `0..=max_bulk_delay` samples.
    pub max_bulk_delay: usize,
    /// Every draw returns the scenario with this seed.
    pub fixed_seed: Option<u64>,
}

impl Default for ScenarioDistribution {
    fn default() -> Self {
        Self {
            kinds: vec![ScenarioKind::DoubleTalk, ScenarioKind::NearEnd, ScenarioKind::FarEnd],
            ser_db: [SER_RANGE_DB.0, SER_RANGE_DB.1],
            snr_db: 5.0,
            noise_probability: 0.5,
            noise: vec![NoiseKind::White, NoiseKind::LowPass],
            rir_length_s: 0.05,
            decay_rate: 60.0,
            nonlinearities: vec![Nonlinearity::None, Nonlinearity::HardClip, Nonlinearity::Arctan],
            max_bulk_delay: 800,
            fixed_seed: None,
        }
    }
}

impl ScenarioDistribution {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.kinds.is_empty() || self.noise.is_empty() || self.nonlinearities.is_empty() {
            return bad("scenario distribution lists must be non-empty");
        }
        let [lo, hi] = self.ser_db;
        if !(lo <= hi && lo >= SER_RANGE_DB.0 && hi <= SER_RANGE_DB.1) {
            return bad("SER interval must lie in [-15, 15] dB");
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return bad("noise probability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Scenario number `index` of the stream seeded by `seed`.
    pub fn sample(&self, seed: u64, index: u64, duration_s: f64) -> ScenarioSpec {
        let scenario_seed = self.fixed_seed.unwrap_or_else(|| derive_seed(seed, index));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario_seed, 0));
        let kind = self.kinds[rng.gen_range(0..self.kinds.len())];
        let [lo, hi] = self.ser_db;
        let ser = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let noisy = rng.gen_bool(self.noise_probability);
        let noise = self.noise[rng.gen_range(0..self.noise.len())];
        let nonlinearity = self.nonlinearities[rng.gen_range(0..self.nonlinearities.len())];
        let bulk_delay = rng.gen_range(0..=self.max_bulk_delay);
        ScenarioSpec {
            kind,
            ser_db: (kind == ScenarioKind::DoubleTalk).then_some(ser),
            snr_db: noisy.then_some(self.snr_db),
            noise,
            duration_s,
            echo: EchoPath {
                rir_length_s: self.rir_length_s,
                decay_rate: self.decay_rate,
                nonlinearity,
                bulk_delay,
            },
            seed: scenario_seed,
        }
    }
}
