use std::fmt::Write as _;

use super::eval::{evaluate, Summary};
use super::pipeline::Utterance;
use super::{Trainer, TrainConfig};
use crate::data::{mix_scenario, ScenarioKind, ScenarioSpec};
use crate::error::Result;
use crate::model::{sha256_hex, AblationCase, ModelConfig, Toggles};

/// One case of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub case: AblationCase,
    pub toggles: Toggles,
    pub param_count: usize,
    pub final_loss: f64,
    pub dt_si_snr: Option<Summary>,
    pub st_ne_si_snr: Option<Summary>,
    pub st_fe_erle: Option<Summary>,
    /// Fingerprint of the trained parameters.
    pub params_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub train_seed: u64,
    pub steps: usize,
    pub eval_scenarios: usize,
}

impl AblationReport {
    /// Cases as rows; module toggles, parameter count and per-scenario
    /// metrics as columns.
    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        let cell = |s: Option<Summary>| s.map_or_else(|| "-".to_string(), |s| s.to_string());
        let mut t = format!(
            "{:<7} {:>3} {:>3} {:>3} {:>10} {:>16} {:>16} {:>16} {:>11}\n",
            "case", "TPB", "TNB", "IB", "params", "DT SI-SNR", "ST_NE SI-SNR", "ST_FE ERLE", "final loss"
        );
        for r in &self.rows {
            let tg = r.toggles;
            let _ = writeln!(
                t,
                "{:<7} {:>3} {:>3} {:>3} {:>10} {:>16} {:>16} {:>16} {:>11.4}",
                r.case.to_string(),
                mark(tg.tpb),
                mark(tg.tnb),
                mark(tg.ib),
                r.param_count,
                cell(r.dt_si_snr),
                cell(r.st_ne_si_snr),
                cell(r.st_fe_erle),
                r.final_loss
            );
        }
        let _ = writeln!(
            t,
            "seed {}, {} steps per case, {} evaluation scenarios; Case 5 replaces the module with two plain attention blocks",
            self.train_seed, self.steps, self.eval_scenarios
        );
        t
    }

    pub fn to_csv(&self) -> String {
        let cell = |s: Option<Summary>| s.map_or_else(|| ",".to_string(), |s| format!("{:.6},{:.6}", s.mean, s.std));
        let mut t = String::from(
            "case,tpb,tnb,ib,params,dt_si_snr_mean,dt_si_snr_std,st_ne_si_snr_mean,st_ne_si_snr_std,st_fe_erle_mean,st_fe_erle_std,final_loss,params_sha256\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                t,
                "{},{},{},{},{},{},{},{},{:.9e},{}",
                r.case.index(),
                r.toggles.tpb as u8,
                r.toggles.tnb as u8,
                r.toggles.ib as u8,
                r.param_count,
                cell(r.dt_si_snr),
                cell(r.st_ne_si_snr),
                cell(r.st_fe_erle),
                r.final_loss,
                r.params_sha256
            );
        }
        t
    }

    /// Digest of the CSV form; equal digests mean bit-identical tables.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_csv())
    }
}

/// Trains every case from the same seed on the same scenario stream and
/// evaluates on the same scenario set.
pub fn ablation_run(
    base: &ModelConfig,
    train: &TrainConfig,
    eval_specs: &[ScenarioSpec],
    cases: &[AblationCase],
    mut on_case: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let utts: Vec<Utterance> = eval_specs
        .iter()
        .map(|s| mix_scenario(s).map(|m| Utterance::from(&m)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(cases.len());
    for &case in cases {
        let cfg = base.clone().with_case(case);
        let mut trainer = Trainer::new(&cfg, train)?;
        let records = trainer.run(None, |_| {})?;
        let report = evaluate(&trainer.store, &cfg, &utts, false)?;
        let pick = |k: ScenarioKind| report.row(k).map(|r| r.model);
        let row = AblationRow {
            case,
            toggles: case.toggles(),
            param_count: trainer.store.param_count(),
            final_loss: records.last().map_or(f64::NAN, |r| r.loss),
            dt_si_snr: pick(ScenarioKind::DoubleTalk),
            st_ne_si_snr: pick(ScenarioKind::NearEnd),
            st_fe_erle: pick(ScenarioKind::FarEnd),
            params_sha256: trainer.store.fingerprint(),
        };
        on_case(&row);
        rows.push(row);
    }
    Ok(AblationReport {
        rows,
        train_seed: train.seed,
        steps: train.steps,
        eval_scenarios: eval_specs.len(),
    })
}
