//! Masked-language-model pretraining.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, MaskedLm};
use super::vocab::{Vocab, CLS, MASK, SEP, SPECIALS};
use crate::autodiff::{Graph, ParamGroup};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::training::optim::{GroupOptimizer, GroupSettings, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// `vocab_size` is the vocabulary cap; the built vocabulary may be smaller.
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_prob: f64,
    /// Share of steps spent warming the learning rate up linearly; it then
    /// decays linearly to zero.
    pub warmup_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 10,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.01,
            mask_prob: 0.15,
            warmup_fraction: 0.1,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_holdout_loss: Vec<f64>,
    pub steps: usize,
}

/// A sequence prepared for the MLM objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Select each non-special token with probability `prob`; of the selected,
/// 80% become `[MASK]`, 10% a random non-special token and 10% stay unchanged.
pub fn mask_tokens<R: Rng>(ids: &[usize], vocab_len: usize, prob: f64, rng: &mut R) -> MaskedSequence {
    let mut input = ids.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) || rng.random::<f64>() >= prob {
            continue;
        }
        positions.push(i);
        targets.push(id);
        let r: f64 = rng.random();
        if r < 0.8 {
            input[i] = MASK;
        } else if r < 0.9 && vocab_len > SPECIALS.len() {
            input[i] = rng.random_range(SPECIALS.len()..vocab_len);
        }
    }
    MaskedSequence {
        input,
        positions,
        targets,
    }
}

/// `[CLS] words [SEP]`, truncating words to fit `max_len`.
pub fn frame(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vec![CLS];
    ids.extend(vocab.tokenize(text).into_iter().take(max_len.saturating_sub(2)));
    ids.push(SEP);
    ids
}

fn batch_loss<T: Scalar>(model: &MaskedLm<T>, g: &mut Graph<T>, batch: &[&MaskedSequence]) -> Result<Option<crate::autodiff::Var>> {
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for seq in batch.iter().filter(|s| !s.positions.is_empty()) {
        let mask = vec![true; seq.input.len()];
        let h = model.encode(g, &seq.input, &mask)?;
        logits.push(model.mlm_logits(g, h, &seq.positions)?);
        targets.extend_from_slice(&seq.targets);
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let all = g.concat_rows(&logits)?;
    Ok(Some(g.cross_entropy(all, &targets)?))
}

/// Mean MLM cross-entropy over every masked position of `seqs`.
pub fn mlm_loss<T: Scalar>(model: &MaskedLm<T>, seqs: &[MaskedSequence]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(32) {
        let refs: Vec<&MaskedSequence> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|s| s.positions.len()).sum();
        let mut g = Graph::eval();
        if let Some(loss) = batch_loss(model, &mut g, &refs)? {
            total += g.scalar(loss)?.to_f64_lossy() * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::Empty("mlm_loss (no masked positions)"));
    }
    Ok(total / count as f64)
}

/// Build a vocabulary from `corpus` and train a fresh model on the MLM objective.
pub fn pretrain_mlm<T: Scalar, S: AsRef<str>>(corpus: &[S], cfg: &PretrainConfig) -> Result<(MaskedLm<T>, PretrainReport)> {
    let vocab = Vocab::build(corpus, cfg.encoder.vocab_size)?;
    let encoder = EncoderConfig {
        vocab_size: vocab.len(),
        ..cfg.encoder
    };
    let mut model = MaskedLm::<T>::new(encoder, vocab, cfg.seed)?;
    let report = continue_pretraining(&mut model, corpus, cfg)?;
    Ok((model, report))
}

/// Run the MLM objective on an existing model.
pub fn continue_pretraining<T: Scalar, S: AsRef<str>>(
    model: &mut MaskedLm<T>,
    corpus: &[S],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut lines: Vec<Vec<usize>> = corpus
        .iter()
        .map(|l| frame(&model.vocab, l.as_ref(), model.config.max_len))
        .filter(|ids| ids.len() > 2)
        .collect();
    lines.shuffle(&mut rng);
    let n_holdout = ((lines.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_holdout = n_holdout.clamp(usize::from(lines.len() > 1), lines.len().saturating_sub(1));
    let train = lines.split_off(n_holdout);
    let holdout = lines;
    if cfg.batch_size == 0 || train.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "pretraining corpus has {} training sequences, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let vlen = model.vocab.len();
    let mut holdout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let holdout: Vec<MaskedSequence> = holdout
        .iter()
        .map(|ids| mask_tokens(ids, vlen, cfg.mask_prob, &mut holdout_rng))
        .collect();
    let holdout_loss = |m: &MaskedLm<T>| if holdout.is_empty() { Ok(f64::NAN) } else { mlm_loss(m, &holdout) };

    let initial = holdout_loss(model)?;
    let mut opt = GroupOptimizer::new(BTreeMap::from([(
        ParamGroup::Plm,
        GroupSettings {
            optimizer: OptimizerKind::Adamw,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
        },
    )]));
    let mut report = PretrainReport {
        initial_holdout_loss: initial,
        final_holdout_loss: initial,
        epoch_train_loss: Vec::new(),
        epoch_holdout_loss: Vec::new(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)).max(1) as f64;
    let warmup = (cfg.warmup_fraction * total_steps).max(1.0);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let masked: Vec<MaskedSequence> = chunk
                .iter()
                .map(|&i| mask_tokens(&train[i], vlen, cfg.mask_prob, &mut rng))
                .collect();
            let refs: Vec<&MaskedSequence> = masked.iter().collect();
            let mut g = Graph::train(rng.random());
            let Some(loss) = batch_loss(model, &mut g, &refs)? else { continue };
            epoch_loss += g.scalar(loss)?.to_f64_lossy();
            batches += 1;
            model.params.zero_grad();
            g.backward(loss, &mut model.params)?;
            let t = report.steps as f64 + 1.0;
            opt.set_lr_scale(if t <= warmup {
                t / warmup
            } else {
                ((total_steps - t + 1.0) / (total_steps - warmup + 1.0)).max(0.0)
            });
            opt.step(&mut model.params)?;
            report.steps += 1;
        }
        model.params.zero_grad();
        report.epoch_train_loss.push(epoch_loss / batches.max(1) as f64);
        let h = holdout_loss(model)?;
        report.epoch_holdout_loss.push(h);
        report.final_holdout_loss = h;
    }
    Ok(report)
}
