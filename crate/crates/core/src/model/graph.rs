use std::collections::HashMap;

use super::params::ParameterStore;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{BnBatchStats, BnMode, Conv2dGeometry, ConvTransposeGeometry, Tape, Var};

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Per-utterance statistics; observed statistics are collected.
    Train,
    /// Stored running statistics; the pass is causal.
    Infer,
}

/// A forward pass in progress: parameters from a store are bound lazily onto
/// a tape, at most once each.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParameterStore,
    mode: Mode,
    grads: bool,
    bound: HashMap<String, Var>,
    bn_stats: Vec<(String, BnBatchStats)>,
}

impl<'a> Graph<'a> {
    /// Parameters are bound as constants; see [`Graph::with_grads`].
    pub fn new(tape: &'a mut Tape, store: &'a ParameterStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            grads: false,
            bound: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    /// Binds trainable parameters as gradient-tracking leaves.
    pub fn with_grads(mut self, grads: bool) -> Self {
        self.grads = grads;
        self
    }

    /// Uses `var` in place of the stored tensor `name`.
    pub fn with_override(mut self, name: &str, var: Var) -> Self {
        self.bound.insert(name.to_string(), var);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    /// Every parameter bound so far.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }

    /// Batch statistics observed in train mode, in evaluation order.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BnBatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .store
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from store")))?;
        let t = entry.tensor.clone();
        let v = if self.grads && entry.role == super::params::Role::Trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, BnMode::Train)?;
                if let Some(s) = stats {
                    self.bn_stats.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Mode::Infer => {
                let missing = |n: &str| Error::Checkpoint(format!("running statistic {n} missing"));
                let (mn, vn) = (format!("{prefix}.mean"), format!("{prefix}.var"));
                let mean = self.store.get(&mn).ok_or_else(|| missing(&mn))?;
                let var = self.store.get(&vn).ok_or_else(|| missing(&vn))?;
                let mode = BnMode::Infer {
                    mean: mean.data(),
                    var: var.data(),
                };
                Ok(self.tape.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }

    /// Channel-wise PReLU on a `[C, T, F]` map.
    pub fn prelu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let alpha = self.p(&format!("{prefix}.alpha"))?;
        let c = self.tape.shape(alpha)[0];
        let a = self.tape.reshape(alpha, &[c, 1, 1])?;
        self.tape.prelu(x, a)
    }

    /// Batch norm followed by PReLU; the pre-activation of every conv after
    /// the first encoder stage.
    pub fn bn_prelu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.batch_norm(&format!("{prefix}.bn"), x)?;
        self.prelu(&format!("{prefix}.prelu"), y)
    }

    pub fn conv(&mut self, prefix: &str, x: Var, geo: Conv2dGeometry) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), geo)
    }

    pub fn deconv(&mut self, prefix: &str, x: Var, geo: ConvTransposeGeometry) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.conv_transpose2d(x, w, Some(b), geo)
    }

    /// `x W + b` for `x: [N, in]`, `W: [in, out]`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    /// `[C, T, F]` dimensions of `x`.
    pub fn dims3(&self, x: Var) -> Result<(usize, usize, usize)> {
        match *self.tape.shape(x) {
            [c, t, f] => Ok((c, t, f)),
            ref s => Err(shape_err!("expected a [C, T, F] map, got {:?}", s)),
        }
    }
}
