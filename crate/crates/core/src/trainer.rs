//! End-to-end training, losses, metrics and prediction.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::Sentence;
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::model::{image_batch, mask_batch, SunetModel};
use crate::params::{ForwardPass, Mode};
use crate::postprocess::{largest_component, threshold};
use crate::synthdata::SegmentationSample;

pub const DICE_SMOOTH: f64 = 1.0;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MIN_TAU: f64 = 0.5;
const BCE_CLAMP: f64 = 1e-7;
const PREDICT_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Taken from the run config's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub loss: LossKind,
    /// When set, the temperature at epoch `t` (from 0) is
    /// `max(0.5, exp(-rate * t))`; otherwise the channel temperature is fixed.
    pub tau_anneal_rate: Option<f64>,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Fraction of subjects held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            loss: LossKind::Dice,
            tau_anneal_rate: None,
            checkpoint_every: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if let Some(r) = self.tau_anneal_rate {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("tau_anneal_rate must be nonnegative, got {r}")));
            }
        }
        Ok(())
    }

    pub fn tau_at(&self, epoch: usize, base: f64) -> f64 {
        match self.tau_anneal_rate {
            Some(r) => (-r * epoch as f64).exp().max(MIN_TAU),
            None => base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub tau: f64,
}

pub const EPOCHS_CSV_HEADER: &str = "epoch,train_loss,val_dsc,tau";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.val_dsc, self.tau)
    }
}

fn check_target(tape: &Tape, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", tape.shape(pred), target.shape()),
        ));
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(format!("{op} target must be binary")));
    }
    Ok(())
}

/// Per-sample `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)`, averaged over
/// the batch (first axis).
pub fn dice_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_target(tape, pred, target, "dice_loss")?;
    let n = target.shape()[0];
    let per = target.len() / n.max(1);
    let t = tape.constant(target.clone().reshape([n, per])?)?;
    let p = tape.reshape(pred, &[n, per])?;
    let pt = tape.mul(p, t)?;
    let inter = tape.sum_axis(pt, 1)?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let sp = tape.sum_axis(p, 1)?;
    let st = tape.sum_axis(t, 1)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio)?;
    let neg = tape.mul_scalar(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_target(tape, pred, target, "bce_loss")?;
    let t = tape.constant(target.clone())?;
    let one_minus_t = tape.constant(Tensor::new(
        target.shape().to_vec(),
        target.data().iter().map(|v| 1.0 - v).collect(),
    )?)?;
    let p = tape.clamp_min(pred, BCE_CLAMP)?;
    let lp = tape.log(p)?;
    let neg_p = tape.mul_scalar(pred, -1.0)?;
    let q = tape.add_scalar(neg_p, 1.0)?;
    let q = tape.clamp_min(q, BCE_CLAMP)?;
    let lq = tape.log(q)?;
    let a = tape.mul(t, lp)?;
    let b = tape.mul(one_minus_t, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.mul_scalar(m, -1.0)
}

/// Dice similarity `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dsc", format!("mask lengths {} and {}", a.len(), b.len())));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        sa += x as usize;
        sb += y as usize;
        inter += (x && y) as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Splits by subject: the last `ceil(fraction * subjects)` subjects in
/// sorted id order form the validation set.
pub fn split_by_subject(
    samples: &[SegmentationSample],
    val_fraction: f64,
) -> (Vec<SegmentationSample>, Vec<SegmentationSample>) {
    let subjects: Vec<&str> = samples
        .iter()
        .map(|s| s.sample_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_val = (val_fraction * subjects.len() as f64).ceil() as usize;
    let val_ids: BTreeSet<&str> = subjects[subjects.len() - n_val.min(subjects.len())..]
        .iter()
        .copied()
        .collect();
    let (val, train): (Vec<_>, Vec<_>) = samples
        .iter()
        .cloned()
        .partition(|s| val_ids.contains(s.sample_id.as_str()));
    (train, val)
}

pub struct Prediction {
    pub mask: Vec<u8>,
    pub sentence: Option<Sentence>,
    pub prob: Vec<f64>,
}

/// Inference-mode forward, threshold at 0.5, largest 8-connected component.
pub fn predict(model: &SunetModel, samples: &[SegmentationSample]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let images = image_batch(&refs)?;
        let mut pass = ForwardPass::new(&model.params, Mode::Infer);
        let img = pass.tape.constant(images)?;
        let res = model.forward::<ChaCha8Rng>(&mut pass, img, 1.0, None)?;
        let probs = pass.tape.data(res.mask_prob);
        let per = probs.len() / chunk.len();
        let mut sentences = res.sender.map(|s| s.sentences.into_iter());
        for (s, prob) in chunk.iter().zip(probs.chunks(per)) {
            out.push(Prediction {
                mask: largest_component(&threshold(prob), s.height, s.width),
                sentence: sentences.as_mut().and_then(Iterator::next),
                prob: prob.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Mean post-processed DSC of `model` on `samples`.
pub fn evaluate(model: &SunetModel, samples: &[SegmentationSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let preds = predict(model, samples)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += dsc(&p.mask, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

struct OptimState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    adam: HashMap<String, AdamState>,
}

impl OptimState {
    fn apply(&mut self, model: &mut SunetModel, grads: Vec<(String, Vec<f64>)>) -> Result<()> {
        self.step += 1;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(self.step), 1.0 - ADAM_BETA2.powi(self.step));
        for (name, g) in grads {
            let p = model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::Tape(format!("gradient for unknown parameter {name}")))?;
            let w = p.data_mut();
            match self.kind {
                Optimizer::Sgd => {
                    for (w, g) in w.iter_mut().zip(&g) {
                        *w -= self.lr * g;
                    }
                }
                Optimizer::Adam => {
                    let st = self.adam.entry(name).or_insert_with(|| AdamState {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    for i in 0..g.len() {
                        st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g[i];
                        st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mh = st.m[i] / bc1;
                        let vh = st.v[i] / bc2;
                        w[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    /// Epoch (from 1) whose parameters were kept.
    pub best_epoch: usize,
}

/// One optimizer step on a batch; returns the batch loss.
fn train_step(
    model: &mut SunetModel,
    batch: &[&SegmentationSample],
    cfg: &TrainConfig,
    tau: f64,
    gumbel: &mut ChaCha8Rng,
    optim: &mut OptimState,
) -> Result<f64> {
    let images = image_batch(batch)?;
    let target = mask_batch(batch)?;
    let (loss, grads, stats) = {
        let mut pass = ForwardPass::new(&model.params, Mode::Train);
        let img = pass.tape.constant(images)?;
        let out = model.forward(&mut pass, img, tau, Some(gumbel))?;
        let loss = match cfg.loss {
            LossKind::Dice => dice_loss(&mut pass.tape, out.mask_prob, &target)?,
            LossKind::Bce => bce_loss(&mut pass.tape, out.mask_prob, &target)?,
        };
        pass.tape.backward(loss)?;
        let value = pass.tape.data(loss)[0];
        let grads: Vec<(String, Vec<f64>)> = pass
            .bound_params()
            .into_iter()
            .filter_map(|(name, v)| pass.tape.grad(v).map(|g| (name, g.to_vec())))
            .collect();
        (value, grads, pass.take_batch_stats())
    };
    if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    optim.apply(model, grads)?;
    model.params.update_running_stats(&stats)?;
    Ok(loss)
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best validation DSC (earliest on ties).
///
/// `on_epoch` runs after every epoch with the report and the current
/// (not best) parameters.
pub fn train(
    model: &mut SunetModel,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &SunetModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let base_tau = model.config.channel.as_ref().map_or(1.0, |c| c.temperature);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    gumbel_rng.set_stream(2);
    let mut optim = OptimState {
        kind: cfg.optimizer,
        lr: cfg.learning_rate,
        step: 0,
        adam: HashMap::new(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let tau = cfg.tau_at(epoch - 1, base_tau);
        let abort = |detail: String| Error::NumericalAbort {
            epoch,
            tau,
            lr: cfg.learning_rate,
            detail,
        };
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegmentationSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let loss = match train_step(model, &batch, cfg, tau, &mut gumbel_rng, &mut optim) {
                Ok(l) => l,
                Err(e @ Error::NonFinite { .. }) => return Err(abort(e.to_string())),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(abort(format!("loss is {loss}")));
            }
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_dsc = if val_set.is_empty() {
            0.0
        } else {
            match evaluate(model, val_set) {
                Ok(d) => d,
                Err(e @ Error::NonFinite { .. }) => return Err(abort(e.to_string())),
                Err(e) => return Err(e),
            }
        };
        let report = EpochReport {
            epoch,
            train_loss,
            val_dsc,
            tau,
        };
        if best.as_ref().is_none_or(|b| val_dsc > b.0) {
            best = Some((val_dsc, epoch, model.params.clone()));
        }
        on_epoch(&report, model)?;
        reports.push(report);
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome { reports, best_epoch })
}
