//! Named parameter storage and per-pass parameter binding.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{BatchStats, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode. Training uses batch statistics and stochastic symbol
/// relaxation; inference is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        }
    }
}

/// Running statistics are stored alongside weights but never optimized.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Insertion-ordered map of named tensors (weights and batch-norm buffers).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(n, _)| !is_buffer(n))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights, buffers excluded.
    pub fn num_learnable(&self) -> usize {
        self.learnable().map(|(_, t)| t.len()).sum()
    }

    /// Uniform `[-a, a]` initialization with `a = sqrt(1 / fan_in)`.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Scale/shift pair plus running statistics for a batch norm over `channels`.
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::full([channels], 1.0))?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros([channels]))?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros([channels]))?;
        self.insert(format!("{prefix}.running_var"), Tensor::full([channels], 1.0))
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            for (suffix, observed) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.{suffix}");
                let t = self
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("missing buffer {name}")))?;
                for (r, o) in t.data_mut().iter_mut().zip(observed.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
            }
        }
        Ok(())
    }
}

/// One recorded forward pass over a [`ParamStore`].
///
/// Parameters are placed on the tape lazily on first use, so gradients are
/// only tracked for the weights a pass actually touches.
pub struct ForwardPass<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'a> ForwardPass<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            mode,
            bn_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = self.tape.param(t)?;
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    fn optional_param(&mut self, name: &str) -> Result<Option<Var>> {
        if self.store.contains(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// `(name, var)` for every parameter bound so far, in binding order
    /// sorted by name for reproducible iteration.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        let mut v: Vec<_> = self.bound.iter().map(|(n, &v)| (n.clone(), v)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Convolution with `{prefix}.weight` and, when stored, `{prefix}.bias`.
    pub fn conv(&mut self, x: Var, prefix: &str, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.optional_param(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, b, (pad, pad), (1, 1))
    }

    /// Affine map `x W + b` with `W` stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(x, w)?;
        match self.optional_param(&format!("{prefix}.bias"))? {
            Some(b) => self.tape.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    /// Batch norm in the pass's mode; training passes record batch statistics.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.bn_stats.push((prefix.to_owned(), stats));
                Ok(y)
            }
            Mode::Infer => {
                let store = self.store;
                let rm = store.require(&format!("{prefix}.running_mean"))?;
                let rv = store.require(&format!("{prefix}.running_var"))?;
                self.tape.batch_norm_eval(x, gamma, beta, rm.data(), rv.data(), BN_EPS)
            }
        }
    }
}
