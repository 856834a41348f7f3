//! Training loop, evaluation and the ablation harness.
//!
//! A training step samples scenarios from a seeded stream, runs the
//! differentiable pipeline `mask -> Y·M -> iSTFT -> loss`, accumulates
//! gradients over the batch, updates batch-norm running statistics and
//! applies one clipped Adam update. Parameters stay `f32`-representable.

mod ablation;
mod eval;
mod pipeline;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_run, AblationReport, AblationRow};
pub use eval::{evaluate, evaluate_specs, score, standard_eval_set, EvalReport, EvalRow, Metric, ScenarioScore, Summary};
pub use pipeline::{
    default_stft, enhance, estimate, loss_pass, prepare, Enhanced, Enhancer, LossPass, Prepared, Utterance,
};

use crate::data::{mix_scenario, ScenarioDistribution, ScenarioSpec};
use crate::error::{Error, Result};
use crate::model::{init_parameters, Graph, Mode, ModelConfig, ParameterStore, Role};
use crate::signal::Stft;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub chunk_seconds: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Weight of the newest batch statistics in the running estimates.
    pub bn_momentum: f64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub scenarios: ScenarioDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 10.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 1,
            steps: 1000,
            clip_norm: 5.0,
            bn_momentum: 0.1,
            checkpoint_every: 0,
            seed: 0,
            scenarios: ScenarioDistribution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.chunk_seconds >= crate::data::MIN_SPEECH_S) || !self.chunk_seconds.is_finite() {
            return bad("chunk_seconds must be at least 0.5");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) || !(self.clip_norm > 0.0) {
            return bad("learning_rate, epsilon and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        self.scenarios.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config always serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Scenario `b` of step `step`.
    pub fn scenario(&self, step: usize, b: usize) -> ScenarioSpec {
        let index = (step * self.batch_size + b) as u64;
        self.scenarios.sample(self.seed, index, self.chunk_seconds)
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Gradient statistics of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    pub grad_norm: f64,
    /// Factor applied to the gradients; 1 unless clipped.
    pub clip_scale: f64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            clip_norm: cfg.clip_norm,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates every trainable entry of `store`; missing gradients count as
    /// zero. Parameters are rounded to `f32` afterwards.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<UpdateInfo> {
        let grad_norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {grad_norm}")));
        }
        let clip_scale = if grad_norm > self.clip_norm {
            self.clip_norm / grad_norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for e in store.entries_mut().filter(|e| e.role == Role::Trainable) {
            let shape = e.tensor.shape().to_vec();
            let m = self.m.entry(e.name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(e.name.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let g = grads.get(&e.name);
            let p = e.tensor.data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]) * clip_scale;
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.round_to_f32();
        Ok(UpdateInfo { grad_norm, clip_scale })
    }
}

/// One completed optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Batch-mean loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub scenario_seeds: Vec<u64>,
}

/// Model, optimiser state and step counter.
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub store: ParameterStore,
    adam: Adam,
    stft: Arc<Stft>,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        Self::from_store(model, config, init_parameters(model)?)
    }

    pub fn from_store(model: &ModelConfig, config: &TrainConfig, store: ParameterStore) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let reference = init_parameters(model)?;
        store.same_layout(&reference).map_err(Error::Checkpoint)?;
        Ok(Self {
            model: model.clone(),
            config: config.clone(),
            store,
            adam: Adam::new(config),
            stft: pipeline::default_stft(),
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Prepared batch of the next step.
    pub fn next_batch(&self) -> Result<Vec<Prepared>> {
        (0..self.config.batch_size)
            .map(|b| {
                let mix = mix_scenario(&self.config.scenario(self.step, b))?;
                prepare(&self.stft, Utterance::from(&mix))
            })
            .collect()
    }

    /// Batch-mean loss and its parameter gradients, with the batch-norm
    /// statistics observed per utterance.
    pub fn loss_and_grads(&self, batch: &[Prepared]) -> Result<(f64, BTreeMap<String, Tensor>, Vec<BnUpdate>)> {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut stats = Vec::new();
        let mut total = 0.0;
        let w = 1.0 / batch.len() as f64;
        for p in batch {
            let mut tape = crate::tensor::Tape::new();
            let mut g = Graph::new(&mut tape, &self.store, Mode::Train).with_grads(true);
            let pass = loss_pass(&mut g, &self.model, &self.stft, p).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} at step {} on scenario seed {}",
                    self.step, p.utterance.seed
                )),
                e => e,
            })?;
            stats.push(g.take_bn_stats());
            let bound: Vec<(String, crate::tensor::Var)> =
                g.bound().iter().map(|(k, &v)| (k.clone(), v)).collect();
            let loss = tape.value(pass.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at step {} on scenario seed {}",
                    self.step, p.utterance.seed
                )));
            }
            total += w * loss;
            let gr = tape.backward(pass.loss)?;
            for (name, v) in bound {
                if let Some(gv) = gr.get(v) {
                    let acc = grads.entry(name).or_insert_with(|| Tensor::zeros(gv.shape()));
                    for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                        *a += w * b;
                    }
                }
            }
        }
        Ok((total, grads, stats))
    }

    /// One optimisation step on the next batch of the scenario stream.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        self.step_on(&batch)
    }

    /// One optimisation step on a given batch.
    pub fn step_on(&mut self, batch: &[Prepared]) -> Result<StepRecord> {
        let (loss, grads, stats) = self.loss_and_grads(batch)?;
        for per_utt in &stats {
            update_running_stats(&mut self.store, per_utt, self.config.bn_momentum)?;
        }
        let info = self.adam.update(&mut self.store, &grads)?;
        if !self.store.all_finite() {
            return Err(Error::NonFinite(format!("parameters became non-finite at step {}", self.step)));
        }
        let rec = StepRecord {
            step: self.step,
            loss,
            grad_norm: info.grad_norm,
            scenario_seeds: batch.iter().map(|p| p.utterance.seed).collect(),
        };
        self.step += 1;
        Ok(rec)
    }

    /// Runs the remaining configured steps. With `out`, writes `loss.csv`,
    /// periodic checkpoints under `out/step_NNNNNN` and the final
    /// checkpoint under `out/checkpoint`.
    pub fn run(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("loss.csv");
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "step,loss").map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            let rec = self.step()?;
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{:.9e}", rec.step, rec.loss).map_err(|e| Error::io(&*path, e))?;
            }
            if let (Some(dir), n) = (out, self.config.checkpoint_every) {
                if n > 0 && self.step.is_multiple_of(n) && self.step < self.config.steps {
                    self.store
                        .save_checkpoint(&self.model, dir.join(format!("step_{:06}", self.step)))?;
                }
            }
            on_step(&rec);
            records.push(rec);
        }
        if let Some(dir) = out {
            self.store.save_checkpoint(&self.model, dir.join("checkpoint"))?;
        }
        Ok(records)
    }
}

/// Batch-norm statistics observed for one utterance, by layer prefix.
pub type BnUpdate = Vec<(String, crate::tensor::BnBatchStats)>;

/// `running = (1 - momentum) running + momentum batch` for every recorded
/// layer.
pub fn update_running_stats(store: &mut ParameterStore, stats: &BnUpdate, momentum: f64) -> Result<()> {
    for (prefix, s) in stats {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var)] {
            let name = format!("{prefix}.{suffix}");
            let t = store
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("running statistic {name} missing")))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = crate::model::params::round_f32((1.0 - momentum) * *r + momentum * b);
            }
        }
    }
    Ok(())
}

/// Trains `model` under `config` from fresh parameters.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    out: Option<&Path>,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ParameterStore, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(model, config)?;
    let records = trainer.run(out, on_step)?;
    Ok((trainer.store, records))
}
