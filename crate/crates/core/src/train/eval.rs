use std::fmt::Write as _;

use rayon::prelude::*;

use super::pipeline::{default_stft, estimate, prepare, Enhancer, Utterance};
use crate::data::{mix_scenario, ScenarioDistribution, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::model::{sha256_hex, ModelConfig, ParameterStore};
use crate::signal::{erle, si_snr};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Scale-invariant SNR of the estimate against the near-end target.
    SiSnr,
    /// Microphone-to-residual energy ratio.
    Erle,
}

impl Metric {
    pub fn for_kind(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::FarEnd => Self::Erle,
            _ => Self::SiSnr,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::SiSnr => "SI-SNR",
            Self::Erle => "ERLE",
        }
    }
}

/// Scores `est` with `metric`; the metric must be the one routed to `kind`.
pub fn score(kind: ScenarioKind, metric: Metric, utt: &Utterance, est: &[f64]) -> Result<f64> {
    if metric != Metric::for_kind(kind) {
        return Err(Error::Config(format!("{} is not reported for {kind} scenarios", metric.label())));
    }
    match metric {
        Metric::SiSnr => {
            if utt.near.samples().iter().all(|&v| v == 0.0) {
                return Err(Error::Config(format!("{kind} scenario has a silent near-end target")));
            }
            si_snr(est, utt.near.samples())
        }
        Metric::Erle => erle(utt.mic.samples(), est),
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = match n {
            1 => 0.0,
            _ => (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
        };
        Some(Self { n, mean, std })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Scores of one utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioScore {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub metric: Metric,
    pub model: f64,
    /// The same metric on the unprocessed microphone signal (SI-SNR only).
    pub input: Option<f64>,
    pub oracle: Option<f64>,
}

/// Aggregate over one scenario kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub kind: ScenarioKind,
    pub metric: Metric,
    pub model: Summary,
    pub input: Option<Summary>,
    pub oracle: Option<Summary>,
}

impl EvalRow {
    /// Mean improvement over the unprocessed input.
    pub fn improvement(&self) -> Option<f64> {
        self.input.map(|i| self.model.mean - i.mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub scores: Vec<ScenarioScore>,
    pub param_count: usize,
    /// SHA-256 of the model configuration.
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn row(&self, kind: ScenarioKind) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// Aligned-column table.
    pub fn to_text(&self) -> String {
        let opt = |s: Option<Summary>| s.map_or_else(|| "-".to_string(), |s| s.to_string());
        let mut t = format!(
            "{:<6} {:<7} {:>3} {:>16} {:>16} {:>16} {:>8}\n",
            "kind", "metric", "n", "model (dB)", "input (dB)", "oracle (dB)", "delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                t,
                "{:<6} {:<7} {:>3} {:>16} {:>16} {:>16} {:>8}",
                r.kind.label(),
                r.metric.label(),
                r.model.n,
                r.model.to_string(),
                opt(r.input),
                opt(r.oracle),
                r.improvement().map_or_else(|| "-".into(), |d| format!("{d:+.2}")),
            );
        }
        let _ = writeln!(t, "parameters: {}", self.param_count);
        let _ = writeln!(t, "config: {}", self.config_fingerprint);
        t
    }

    pub fn to_csv(&self) -> String {
        let cell = |s: Option<Summary>| s.map_or_else(|| ",".to_string(), |s| format!("{:.6},{:.6}", s.mean, s.std));
        let mut t = String::from(
            "kind,metric,n,model_mean,model_std,input_mean,input_std,oracle_mean,oracle_std,param_count,config\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{},{},{}",
                r.kind.label(),
                r.metric.label(),
                r.model.n,
                cell(Some(r.model)),
                cell(r.input),
                cell(r.oracle),
                self.param_count,
                self.config_fingerprint
            );
        }
        t
    }
}

/// Inference on every utterance. With `oracle`, also scores the ideal-mask
/// pipeline as an upper-bound row.
pub fn evaluate(
    store: &ParameterStore,
    cfg: &ModelConfig,
    utterances: &[Utterance],
    oracle: bool,
) -> Result<EvalReport> {
    let stft = default_stft();
    let scores: Vec<ScenarioScore> = utterances
        .par_iter()
        .map(|u| {
            let metric = Metric::for_kind(u.kind);
            let p = prepare(&stft, u.clone())?;
            let est = estimate(&stft, &p, Enhancer::Model { store, cfg })?;
            let model = score(u.kind, metric, u, est.samples())?;
            let input = match metric {
                Metric::SiSnr => Some(score(u.kind, metric, u, u.mic.samples())?),
                Metric::Erle => None,
            };
            let oracle = match oracle {
                true => Some(score(u.kind, metric, u, estimate(&stft, &p, Enhancer::Oracle)?.samples())?),
                false => None,
            };
            Ok(ScenarioScore {
                kind: u.kind,
                seed: u.seed,
                metric,
                model,
                input,
                oracle,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for kind in ScenarioKind::ALL {
        let of_kind: Vec<&ScenarioScore> = scores.iter().filter(|s| s.kind == kind).collect();
        let collect = |f: &dyn Fn(&ScenarioScore) -> Option<f64>| -> Option<Summary> {
            let v: Vec<f64> = of_kind.iter().filter_map(|s| f(s)).collect();
            Summary::of(&v)
        };
        if let Some(model) = collect(&|s| Some(s.model)) {
            rows.push(EvalRow {
                kind,
                metric: Metric::for_kind(kind),
                model,
                input: collect(&|s| s.input),
                oracle: collect(&|s| s.oracle),
            });
        }
    }
    Ok(EvalReport {
        rows,
        scores,
        param_count: store.param_count(),
        config_fingerprint: sha256_hex(&cfg.to_toml()),
    })
}

/// [`evaluate`] on generated scenarios.
pub fn evaluate_specs(
    store: &ParameterStore,
    cfg: &ModelConfig,
    specs: &[ScenarioSpec],
    oracle: bool,
) -> Result<EvalReport> {
    let utts: Vec<Utterance> = specs
        .par_iter()
        .map(|s| mix_scenario(s).map(|m| Utterance::from(&m)))
        .collect::<Result<_>>()?;
    evaluate(store, cfg, &utts, oracle)
}

/// `per_kind` scenarios of each kind drawn from the default distribution.
pub fn standard_eval_set(seed: u64, per_kind: usize, duration_s: f64) -> Vec<ScenarioSpec> {
    let mut out = Vec::with_capacity(3 * per_kind);
    for (k, kind) in ScenarioKind::ALL.into_iter().enumerate() {
        let dist = ScenarioDistribution {
            kinds: vec![kind],
            ..ScenarioDistribution::default()
        };
        for i in 0..per_kind {
            out.push(dist.sample(seed, (k * per_kind + i) as u64, duration_s));
        }
    }
    out
}
