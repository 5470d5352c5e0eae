//! Adam with decoupled weight decay, a warmup + linear-decay schedule and a
//! deterministic epoch loop shared by the prior classifier and the PViT.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::Params;
use crate::rng::SeededRng;
use crate::tensor::{argmax, Tape, Tensor, Var};

pub const ADAM_EPS: f64 = 1e-8;

/// One training or inference input: flattened pixels plus the sample's
/// prior logits (ignored by networks without a prior token).
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub pixels: &'a [f64],
    pub prior: &'a [f64],
}

/// A classifier the trainer can optimize.
pub trait Network {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;
    fn num_classes(&self) -> usize;

    /// Records the forward pass for `batch` on `tape` and returns the B×K
    /// logits. `vars` are the parameters bound on the same tape, in
    /// declaration order.
    fn batch_logits(&self, tape: &mut Tape, vars: &[Var], batch: &[Sample<'_>]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 3e-4,
            warmup_epochs: 1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The large-scale recipe: 20 epochs, batch 256, lr 0.1, 5 warmup epochs.
    pub fn large_scale() -> Self {
        Self { epochs: 20, batch_size: 256, base_lr: 0.1, warmup_epochs: 5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Invalid(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Invalid(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Linear ramp 0 → base over the warmup steps, then linear decay to 0 at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            base_lr: cfg.base_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step < w {
            self.base_lr * step as f64 / w as f64
        } else if step >= t {
            if t == w { self.base_lr } else { 0.0 }
        } else {
            self.base_lr * (t - step) as f64 / (t - w) as f64
        }
    }

    /// Rate used for the update with 0-based index `update`. Warmup updates
    /// take the rate at the end of their step and decay updates the rate at
    /// its start, so every update gets a positive rate and the peak is hit.
    pub fn lr_for_update(&self, update: usize) -> f64 {
        if update < self.warmup_steps {
            self.lr_at(update + 1)
        } else {
            self.lr_at(update)
        }
    }
}

/// Adam moments, one buffer per parameter tensor, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    epochs_done: usize,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let zeros = |i| vec![0.0; params.tensor(i).numel()];
        Self {
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
            step: 0,
            epochs_done: 0,
        }
    }

    pub fn save(&self, path: &Path, params: &Params) -> Result<()> {
        let header = serde_json::to_string(&StateHeader { step: self.step, epochs_done: self.epochs_done })
            .expect("header serializes");
        let mut tensors = Vec::with_capacity(2 * params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            let shape = t.shape().to_vec();
            tensors.push((format!("m.{name}"), Tensor::new(shape.clone(), self.m[i].clone())?));
            tensors.push((format!("v.{name}"), Tensor::new(shape, self.v[i].clone())?));
        }
        checkpoint::write(path, &header, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: &Path, params: &Params) -> Result<Self> {
        let (header, tensors) = checkpoint::read(path)?;
        let h: StateHeader = serde_json::from_str(&header)
            .map_err(|e| Error::Format(format!("{}: bad optimizer header: {e}", path.display())))?;
        if tensors.len() != 2 * params.len() {
            return Err(Error::Format(format!("{}: optimizer state does not match model", path.display())));
        }
        let mut state = Self::new(params);
        for (i, (name, t)) in params.iter().enumerate() {
            let (mn, mt) = &tensors[2 * i];
            let (vn, vt) = &tensors[2 * i + 1];
            if *mn != format!("m.{name}") || *vn != format!("v.{name}") || mt.shape() != t.shape() || vt.shape() != t.shape() {
                return Err(Error::Format(format!("{}: optimizer entry for `{name}` mismatched", path.display())));
            }
            state.m[i] = mt.data().to_vec();
            state.v[i] = vt.data().to_vec();
        }
        state.step = h.step;
        state.epochs_done = h.epochs_done;
        Ok(state)
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`p ← p·(1 − lr·wd)` before the moment step).
pub fn adam_step(params: &mut Params, grads: &[Vec<f64>], state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let n = params.tensor(i).numel();
        if g.len() != n || state.m[i].len() != n {
            return Err(Error::Shape(format!("gradient for `{}` has {} values, expected {n}", params.name(i), g.len())));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}` contains {bad}", params.name(i))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] = p[j] * shrink - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy of this batch's predictions before the update.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub curve: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub state: OptimizerState,
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Runs the remaining epochs of `cfg` on `net`.
///
/// Batches are drawn from a fresh seeded permutation per epoch (stream =
/// epoch index + 1; stream 0 is left to weight init), so a run resumed
/// from `resume` sees the same batches as an uninterrupted one.
pub fn train<N: Network>(
    net: &mut N,
    samples: &[Sample<'_>],
    labels: &[usize],
    cfg: &TrainConfig,
    resume: Option<OptimizerState>,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if labels.len() != samples.len() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), samples.len())));
    }
    let k = net.num_classes();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!("label {bad} outside [0, {k})")));
    }
    let spe = steps_per_epoch(samples.len(), cfg.batch_size);
    let schedule = LrSchedule::new(cfg, spe);
    let mut state = match resume {
        Some(s) => {
            if s.m.len() != net.params().len() {
                return Err(Error::Invalid("optimizer state does not match the network".into()));
            }
            if s.step != (s.epochs_done * spe) as u64 {
                return Err(Error::Invalid(format!(
                    "optimizer state at step {} is not on an epoch boundary ({} steps per epoch)",
                    s.step, spe
                )));
            }
            s
        }
        None => OptimizerState::new(net.params()),
    };

    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let order = SeededRng::with_stream(cfg.seed, epoch as u64 + 1).permutation(samples.len());
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let vars = net.params().bind(&mut tape, true);
            let logits = net.batch_logits(&mut tape, &vars, &batch)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {} is {loss_value}", state.step)));
            }
            let hits = {
                let z = tape.value(logits);
                targets.iter().enumerate().filter(|(r, &t)| argmax(z.row_slice(*r)) == t).count()
            };
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(net.params().iter())
                .map(|(&v, (_, t))| tape.grad_data(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            drop(tape);

            let lr = schedule.lr_for_update(state.step as usize);
            adam_step(net.params_mut(), &grads, &mut state, lr, cfg)?;
            correct += hits;
            loss_sum += loss_value * chunk.len() as f64;
            curve.push(StepRecord {
                step: state.step,
                epoch,
                lr,
                loss: loss_value,
                accuracy: hits as f64 / chunk.len() as f64,
            });
        }
        state.epochs_done = epoch + 1;
        let summary = EpochSummary {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        on_epoch(&summary);
        epochs.push(summary);
    }
    Ok(TrainReport { curve, epochs, state })
}

/// Logits for every sample, computed in batches without gradients.
pub fn predict<N: Network>(net: &N, samples: &[Sample<'_>], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape, false);
        let z = net.batch_logits(&mut tape, &vars, chunk)?;
        let z = tape.value(z);
        for r in 0..chunk.len() {
            out.push(z.row_slice(r).to_vec());
        }
    }
    Ok(out)
}

pub fn accuracy<N: Network>(net: &N, samples: &[Sample<'_>], labels: &[usize]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let logits = predict(net, samples, 64)?;
    let hits = logits.iter().zip(labels).filter(|(z, &l)| argmax(z) == l).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// CSV with header `step,epoch,lr,loss,accuracy`.
pub fn loss_csv(curve: &[StepRecord]) -> String {
    let mut s = String::from("step,epoch,lr,loss,accuracy\n");
    for r in curve {
        writeln!(s, "{},{},{},{},{}", r.step, r.epoch, r.lr, r.loss, r.accuracy).expect("string write");
    }
    s
}
