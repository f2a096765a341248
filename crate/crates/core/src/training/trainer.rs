//! The training loop shared by both paradigms.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricsReport};
use super::optim::{GroupOptimizer, GroupSettings, OptimizerKind};
use crate::autodiff::{Graph, ParamGroup};
use crate::error::{Error, Result};
use crate::model::{Classifier, Prepared};
use crate::scalar::Scalar;
use crate::tasks::Example;

/// Per-group values. Groups left out of a config keep their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "V: Deserialize<'de>, PerGroup<V>: Default"))]
pub struct PerGroup<V> {
    pub plm: V,
    pub head: V,
    pub template: V,
    pub verbalizer: V,
}

impl<V: Copy> PerGroup<V> {
    pub fn get(&self, g: ParamGroup) -> V {
        match g {
            ParamGroup::Plm => self.plm,
            ParamGroup::Head => self.head,
            ParamGroup::Template => self.template,
            ParamGroup::Verbalizer => self.verbalizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr: PerGroup<f64>,
    pub optimizer: PerGroup<OptimizerKind>,
    /// Decoupled decay for AdamW groups.
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub plm_frozen: bool,
}

impl Default for PerGroup<f64> {
    fn default() -> Self {
        Self {
            plm: 1e-4,
            head: 4.8e-3,
            template: 1.21e-2,
            verbalizer: 7e-3,
        }
    }
}

impl Default for PerGroup<OptimizerKind> {
    fn default() -> Self {
        Self {
            plm: OptimizerKind::Adamw,
            head: OptimizerKind::Adamw,
            template: OptimizerKind::Adafactor,
            verbalizer: OptimizerKind::Adamw,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grad_accum_steps: 10,
            epochs: 20,
            max_steps: None,
            lr: PerGroup::default(),
            optimizer: PerGroup::default(),
            weight_decay: 0.01,
            dropout: 0.1,
            seed: 0,
            plm_frozen: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be at least 1".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for g in ParamGroup::ALL {
            let lr = self.lr.get(g);
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate for {g} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn group_settings(&self) -> BTreeMap<ParamGroup, GroupSettings> {
        ParamGroup::ALL
            .into_iter()
            .map(|g| {
                (
                    g,
                    GroupSettings {
                        optimizer: self.optimizer.get(g),
                        lr: self.lr.get(g),
                        weight_decay: self.weight_decay,
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_balanced_accuracy: Option<f64>,
    pub val_f1_weighted: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose state was kept (1-based); 0 means the initial state.
    pub best_epoch: usize,
    pub best_val: Option<MetricsReport>,
    pub steps: usize,
    pub n_trainable_params: usize,
    /// Scalars touched by each optimizer step.
    pub updates_per_step: Vec<usize>,
}

/// Accumulate gradients of the mean loss over `batch`, evaluated in
/// micro-batches of `micro` examples. Each micro-batch loss is weighted by
/// its share of the batch, so the result equals the gradient of the whole
/// batch's mean loss. Returns that mean loss.
pub fn accumulate_gradients<T: Scalar>(
    model: &mut Classifier<T>,
    batch: &[&Prepared<T>],
    labels: &[usize],
    micro: usize,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Empty("accumulation window"));
    }
    let total = batch.len() as f64;
    let mut mean = 0.0;
    for (k, (items, ys)) in batch.chunks(micro.max(1)).zip(labels.chunks(micro.max(1))).enumerate() {
        let mut g = match dropout_seed {
            Some(s) => Graph::train(s.wrapping_add(k as u64)),
            None => Graph::eval(),
        };
        let loss = model.loss(&mut g, items, ys)?;
        let w = items.len() as f64 / total;
        mean += g.scalar(loss)?.to_f64_lossy() * w;
        let scaled = g.scale(loss, T::c(w));
        g.backward(scaled, &mut model.lm.params)?;
    }
    Ok(mean)
}

/// Metrics and mean loss of `model` on prepared inputs.
pub fn evaluate_prepared<T: Scalar>(model: &Classifier<T>, items: &[Prepared<T>], labels: &[usize]) -> Result<MetricsReport> {
    let probs = model.predict_proba(items)?;
    let mut report = compute_metrics(labels, &probs, model.n_classes())?;
    let loss = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64;
    report.loss = Some(loss);
    report.n_trainable_params = model.n_trainable_params();
    Ok(report)
}

pub fn evaluate<T: Scalar>(model: &Classifier<T>, data: &[Example]) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let items = model.prepare_all(&texts)?;
    evaluate_prepared(model, &items, &labels)
}

/// Train `model` in place and leave it at its best-on-validation state
/// (highest balanced accuracy, earliest on ties). With no validation data
/// the final state is kept.
pub fn train<T: Scalar>(model: &mut Classifier<T>, train_data: &[Example], val_data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    model.set_plm_frozen(cfg.plm_frozen);
    model.set_dropout(cfg.dropout);
    let n_trainable = model.n_trainable_params();
    if n_trainable == 0 {
        return Err(Error::Config("every parameter group is frozen; nothing to train".into()));
    }
    let mut opt = GroupOptimizer::new(cfg.group_settings());
    opt.check_coverage(&model.lm.params)?;

    let texts: Vec<&str> = train_data.iter().map(|e| e.text.as_str()).collect();
    let labels: Vec<usize> = train_data.iter().map(|e| e.label).collect();
    let items = model.prepare_all(&texts)?;
    let val_labels: Vec<usize> = val_data.iter().map(|e| e.label).collect();
    let val_items = model.prepare_all(&val_data.iter().map(|e| e.text.as_str()).collect::<Vec<_>>())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let window = cfg.batch_size * cfg.grad_accum_steps;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: 0,
        best_val: None,
        steps: 0,
        n_trainable_params: n_trainable,
        updates_per_step: Vec::new(),
    };
    let mut best: Option<(f64, Vec<_>)> = None;
    if !val_items.is_empty() {
        let m = evaluate_prepared(model, &val_items, &val_labels)?;
        best = Some((m.balanced_accuracy, model.lm.params.snapshot_trainable()));
        outcome.best_val = Some(m);
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    let epochs = if cfg.epochs == 0 { usize::MAX } else { cfg.epochs };
    'epochs: for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut windows = 0usize;
        for chunk in order.chunks(window) {
            if cfg.max_steps.is_some_and(|m| outcome.steps >= m) {
                break;
            }
            let batch: Vec<&Prepared<T>> = chunk.iter().map(|&i| &items[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            model.lm.params.zero_grad();
            loss_sum += accumulate_gradients(model, &batch, &ys, cfg.batch_size, Some(rng.random()))?;
            windows += 1;
            let updated = opt.step(&mut model.lm.params)?;
            outcome.updates_per_step.push(updated);
            outcome.steps += 1;
        }
        model.lm.params.zero_grad();
        let mut record = EpochRecord {
            epoch,
            steps: outcome.steps,
            train_loss: loss_sum / windows.max(1) as f64,
            val_loss: None,
            val_balanced_accuracy: None,
            val_f1_weighted: None,
            val_auc: None,
        };
        if !val_items.is_empty() {
            let m = evaluate_prepared(model, &val_items, &val_labels)?;
            record.val_loss = m.loss;
            record.val_balanced_accuracy = Some(m.balanced_accuracy);
            record.val_f1_weighted = Some(m.f1_weighted);
            record.val_auc = Some(m.auc_macro_ovr);
            if best.as_ref().is_none_or(|(b, _)| m.balanced_accuracy > *b) {
                best = Some((m.balanced_accuracy, model.lm.params.snapshot_trainable()));
                outcome.best_epoch = epoch;
                outcome.best_val = Some(m);
            }
        } else {
            outcome.best_epoch = epoch;
        }
        log::debug!("epoch {epoch}: train loss {:.4}", record.train_loss);
        outcome.history.push(record);
        if windows == 0 || cfg.max_steps.is_some_and(|m| outcome.steps >= m) {
            break 'epochs;
        }
    }
    if let Some((_, snap)) = best {
        model.lm.params.restore(&snap)?;
    }
    Ok(outcome)
}
