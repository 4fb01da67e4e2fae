//! Multi-task optimisation of the weighted objective
//! `alpha · L_rd + beta · L_qg + gamma · L_rg`.
//!
//! Each task loss is the mean of its instances' token-mean cross-entropies
//! within the minibatch. RD and QG instances share one input format and are
//! told apart by their target (the "No Query" sentinel vs. a real query).

use serde::{Deserialize, Serialize};

use crate::corpus::{epoch_batches, Ablation, DEFAULT_MAX_CONTEXT_TURNS};
use crate::model::{Checkpoint, EncodedInstance, Matrix, Model, ModelError, TrainingState};
use crate::types::{LossWeights, TaskInstance, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint cadence in steps; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many optimisation steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 2e-5,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 0,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config("grad_clip and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Warmup-then-constant schedule; `step` is 1-based.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}; parameters kept from step {last_good_step}")]
    Diverged { step: u64, last_good_step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint sink: {0}")]
    Sink(String),
}

/// Per-task means and the weighted total for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLoss {
    pub total: f64,
    pub rd: Option<f64>,
    pub qg: Option<f64>,
    pub rg: Option<f64>,
    pub counts: [usize; 3],
}

impl WeightedLoss {
    pub fn mean(&self, kind: TaskKind) -> Option<f64> {
        match kind {
            TaskKind::Rd => self.rd,
            TaskKind::Qg => self.qg,
            TaskKind::Rg => self.rg,
        }
    }
}

fn kind_index(k: TaskKind) -> usize {
    match k {
        TaskKind::Rd => 0,
        TaskKind::Qg => 1,
        TaskKind::Rg => 2,
    }
}

pub fn compute_weighted_loss(losses: &[f64], kinds: &[TaskKind], weights: &LossWeights) -> Result<WeightedLoss, TrainError> {
    if losses.len() != kinds.len() {
        return Err(TrainError::Contract(format!("{} losses but {} kinds", losses.len(), kinds.len())));
    }
    if losses.is_empty() {
        return Err(TrainError::Contract("no instances in batch".into()));
    }
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (l, k) in losses.iter().zip(kinds) {
        sums[kind_index(*k)] += l;
        counts[kind_index(*k)] += 1;
    }
    let mean = |i: usize| (counts[i] > 0).then(|| sums[i] / counts[i] as f64);
    let (rd, qg, rg) = (mean(0), mean(1), mean(2));
    let total = weights.alpha * rd.unwrap_or(0.0) + weights.beta * qg.unwrap_or(0.0) + weights.gamma * rg.unwrap_or(0.0);
    Ok(WeightedLoss { total, rd, qg, rg, counts })
}

/// d(total)/d(loss_i) for every instance: the task weight over the task's
/// count in the batch.
pub fn instance_weights(kinds: &[TaskKind], weights: &LossWeights) -> Vec<f64> {
    let mut counts = [0usize; 3];
    for k in kinds {
        counts[kind_index(*k)] += 1;
    }
    kinds.iter().map(|k| weights.for_kind(*k) / counts[kind_index(*k)] as f64).collect()
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Matrix> = model.params.entries.iter().map(|e| Matrix::zeros(e.value.rows, e.value.cols)).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One decoupled-weight-decay Adam update with learning rate `lr`.
    pub fn update(&mut self, model: &mut Model, grads: &[Matrix], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (pid, g) in grads.iter().enumerate() {
            let p = model.params.get_mut(pid);
            // Norm gains and biases (single-row tensors) are not decayed.
            let decay = if p.rows > 1 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[pid], &mut self.v[pid]);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
                v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * p.data[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_rd: Option<f64>,
    pub l_qg: Option<f64>,
    pub l_rg: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Receives step logs and checkpoints as training progresses.
pub trait TrainSink {
    fn on_step(&mut self, _log: &StepLog) {}
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainSink for MemorySink {
    fn on_step(&mut self, log: &StepLog) {
        self.logs.push(log.clone());
    }
    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }
}

impl TrainSink for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: u64,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub max_context_turns: usize,
    pub ablation: Ablation,
    opt: AdamState,
    step: u64,
    epoch: u64,
    batch_in_epoch: usize,
    last_checkpoint_step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let opt = AdamState::new(&model);
        Ok(Self {
            model,
            cfg,
            max_context_turns: DEFAULT_MAX_CONTEXT_TURNS,
            ablation: Ablation::Full,
            opt,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            last_checkpoint_step: 0,
        })
    }

    pub fn with_corpus_settings(mut self, max_context_turns: usize, ablation: Ablation) -> Self {
        self.max_context_turns = max_context_turns;
        self.ablation = ablation;
        self
    }

    /// Continues from a checkpoint. The stored training config is used unless
    /// `cfg` overrides it.
    pub fn resume(ckpt: &Checkpoint, cfg: Option<TrainConfig>) -> Result<Self, TrainError> {
        let model = ckpt.restore_model().map_err(|e| TrainError::Contract(e.to_string()))?;
        let cfg = cfg.or_else(|| ckpt.config.train.clone()).unwrap_or_default();
        let mut t = Self::new(model, cfg)?;
        t.max_context_turns = ckpt.config.max_context_turns;
        t.ablation = ckpt.config.ablation;
        let s = &ckpt.training;
        t.step = s.step;
        t.epoch = s.epoch;
        t.batch_in_epoch = s.batch_in_epoch;
        t.last_checkpoint_step = s.step;
        if let Some(o) = &s.optimizer {
            if o.m.len() != t.model.params.len() {
                return Err(TrainError::Contract("optimizer state does not match parameters".into()));
            }
            t.opt = o.clone();
        }
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            self.max_context_turns,
            self.ablation,
            Some(self.cfg.clone()),
            TrainingState {
                step: self.step,
                seed: self.cfg.seed,
                epoch: self.epoch,
                batch_in_epoch: self.batch_in_epoch,
                optimizer: Some(self.opt.clone()),
            },
        )
    }

    pub fn encode(&self, instances: &[TaskInstance]) -> Result<Vec<EncodedInstance>, TrainError> {
        instances.iter().map(|i| self.model.encode_instance(i).map_err(TrainError::from)).collect()
    }

    /// Losses and (unapplied) accumulated gradients for a batch.
    pub fn batch_gradients(&self, batch: &[&EncodedInstance]) -> Result<(WeightedLoss, Vec<Matrix>), TrainError> {
        let kinds: Vec<TaskKind> = batch.iter().map(|b| b.kind).collect();
        let weights = instance_weights(&kinds, &self.cfg.weights);
        let mut grads: Vec<Matrix> =
            self.model.params.entries.iter().map(|e| Matrix::zeros(e.value.rows, e.value.cols)).collect();
        let mut losses = Vec::with_capacity(batch.len());
        for (inst, &w) in batch.iter().zip(&weights) {
            if w == 0.0 {
                losses.push(self.model.instance_loss(inst));
                continue;
            }
            let (loss, g) = self.model.loss_and_grads(inst, w);
            losses.push(loss);
            for (pid, gm) in g {
                grads[pid].add_assign(&gm);
            }
        }
        let wl = compute_weighted_loss(&losses, &kinds, &self.cfg.weights)?;
        Ok((wl, grads))
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &[&EncodedInstance]) -> Result<StepLog, TrainError> {
        let (wl, mut grads) = self.batch_gradients(batch)?;
        if !wl.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { step: self.step + 1, last_good_step: self.last_checkpoint_step });
        }
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
            if norm > self.cfg.grad_clip {
                let s = self.cfg.grad_clip / norm;
                grads.iter_mut().for_each(|g| g.scale(s));
            }
        }
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        self.opt.update(&mut self.model, &grads, lr, &self.cfg);
        Ok(StepLog { step: self.step, l_rd: wl.rd, l_qg: wl.qg, l_rg: wl.rg, total: wl.total, lr })
    }

    fn emit_checkpoint(&mut self, sink: &mut dyn TrainSink) -> Result<(), TrainError> {
        sink.on_checkpoint(&self.checkpoint())?;
        self.last_checkpoint_step = self.step;
        Ok(())
    }

    /// Runs the remaining epochs (or until `max_steps`) over `data`.
    pub fn run(&mut self, data: &[EncodedInstance], sink: &mut dyn TrainSink) -> Result<TrainReport, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Contract("training needs at least one instance".into()));
        }
        if self.step == 0 {
            self.emit_checkpoint(sink)?;
        }
        let mut report = TrainReport { steps: 0, first_total: None, last_total: None };
        'epochs: while self.epoch < self.cfg.epochs {
            let batches = epoch_batches(data.len(), self.cfg.batch_size, self.cfg.seed, self.epoch)
                .map_err(|e| TrainError::Contract(e.to_string()))?;
            while self.batch_in_epoch < batches.len() {
                if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break 'epochs;
                }
                let batch: Vec<&EncodedInstance> = batches[self.batch_in_epoch].iter().map(|&i| &data[i]).collect();
                let log = self.step(&batch)?;
                self.batch_in_epoch += 1;
                if self.batch_in_epoch == batches.len() {
                    self.epoch += 1;
                    self.batch_in_epoch = 0;
                }
                report.steps += 1;
                report.first_total.get_or_insert(log.total);
                report.last_total = Some(log.total);
                sink.on_step(&log);
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.emit_checkpoint(sink)?;
                }
                if self.batch_in_epoch == 0 {
                    continue 'epochs;
                }
            }
        }
        if report.steps > 0 && self.last_checkpoint_step != self.step {
            self.emit_checkpoint(sink)?;
        }
        Ok(report)
    }
}

/// Trains `model` on `instances` and returns the trained model.
pub fn train(model: Model, instances: &[TaskInstance], cfg: TrainConfig, sink: &mut dyn TrainSink) -> Result<(Model, TrainReport), TrainError> {
    let mut trainer = Trainer::new(model, cfg)?;
    let data = trainer.encode(instances)?;
    let report = trainer.run(&data, sink)?;
    Ok((trainer.model, report))
}
