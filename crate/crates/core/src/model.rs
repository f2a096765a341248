//! Classifier assemblies: prompt (template + verbalizer over the MLM) and
//! classic (pooled encoder output + MLP head).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamOwner, ParamStore, Var};
use crate::error::{Error, Result};
use crate::head::{pool, MlpHead, MlpHeadConfig};
use crate::plm::pretrain::frame;
use crate::plm::MaskedLm;
use crate::scalar::Scalar;
use crate::template::{PromptedSequence, SoftTokenBank, Template};
use crate::verbalizer::{extract_mask_hidden, Verbalizer, VerbalizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Prompt,
    Classic,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Prompt => "prompt",
            Paradigm::Classic => "classic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptHead {
    pub template: Template,
    pub bank: Option<SoftTokenBank>,
    pub verbalizer: Verbalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Prompt(PromptHead),
    Classic(MlpHead),
}

/// An input made ready for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Prepared<T> {
    Prompt(PromptedSequence),
    /// Framed token ids; `pooled` caches the sentence embedding of a frozen encoder.
    Classic { ids: Vec<usize>, pooled: Option<Vec<T>> },
}

/// One model assembly. Every parameter (encoder, soft tokens, theta, head)
/// lives in `lm.params`, tagged by group.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub lm: MaskedLm<T>,
    pub head: Head,
    pub class_names: Vec<String>,
    /// Dropout on the mask hidden state (prompt) or after head activations (classic).
    pub dropout: f64,
    encoder_dropout: f64,
    plm_frozen: bool,
}

impl<T: Scalar> Classifier<T> {
    /// Prompt assembly. Soft tokens and theta are initialized from `seed`.
    pub fn prompt(mut lm: MaskedLm<T>, template: Template, verbalizer: &VerbalizerSpec, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        template.wrap(&lm.vocab, &[], lm.config.max_len)?;
        let bank = if template.soft_count() > 0 {
            Some(SoftTokenBank::init(&template, &mut lm, seed)?)
        } else {
            None
        };
        let verbalizer = Verbalizer::from_spec(verbalizer, &class_names, &mut lm, seed.wrapping_add(1))?;
        Ok(Self::assemble(
            lm,
            Head::Prompt(PromptHead {
                template,
                bank,
                verbalizer,
            }),
            class_names,
            0.0,
        ))
    }

    /// Classic assembly; `input_dim` and `n_classes` of `head` are filled in.
    pub fn classic(mut lm: MaskedLm<T>, head: MlpHeadConfig, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        let cfg = MlpHeadConfig {
            input_dim: lm.hidden_dim(),
            n_classes: class_names.len(),
            ..head
        };
        let dropout = cfg.dropout;
        let head = MlpHead::init(cfg, &mut lm.params, seed)?;
        Ok(Self::assemble(lm, Head::Classic(head), class_names, dropout))
    }

    fn assemble(lm: MaskedLm<T>, head: Head, class_names: Vec<String>, dropout: f64) -> Self {
        let encoder_dropout = lm.config.dropout;
        let mut c = Self {
            lm,
            head,
            class_names,
            dropout,
            encoder_dropout,
            plm_frozen: false,
        };
        c.set_plm_frozen(false);
        c
    }

    pub fn paradigm(&self) -> Paradigm {
        match self.head {
            Head::Prompt(_) => Paradigm::Prompt,
            Head::Classic(_) => Paradigm::Classic,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Whether the forward pass reads the MLM decoder.
    fn uses_decoder(&self) -> bool {
        matches!(
            &self.head,
            Head::Prompt(PromptHead {
                verbalizer: Verbalizer::Manual(_),
                ..
            })
        )
    }

    /// Freeze or unfreeze the encoder. A frozen encoder runs without dropout;
    /// the MLM decoder stays frozen whenever the head bypasses it.
    pub fn set_plm_frozen(&mut self, frozen: bool) {
        self.plm_frozen = frozen;
        self.lm.set_frozen(frozen);
        self.lm.config.dropout = if frozen { 0.0 } else { self.encoder_dropout };
        if !frozen && !self.uses_decoder() {
            for id in [self.lm.decoder_weight(), self.lm.decoder_bias()] {
                self.lm.params.get_mut(id).frozen = true;
            }
        }
    }

    pub fn plm_frozen(&self) -> bool {
        self.plm_frozen
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.dropout = p;
        if let Head::Classic(h) = &mut self.head {
            h.config.dropout = p;
        }
    }

    pub fn n_trainable_params(&self) -> usize {
        self.lm.params.trainable_count()
    }

    /// Trainable scalars per group.
    pub fn trainable_by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for (_, p) in self.lm.params.iter().filter(|(_, p)| !p.frozen) {
            *out.entry(p.group).or_insert(0) += p.tensor.len();
        }
        out
    }

    pub fn prepare(&self, text: &str) -> Result<Prepared<T>> {
        let max_len = self.lm.config.max_len;
        match &self.head {
            Head::Prompt(p) => {
                let ids = self.lm.vocab.tokenize(text);
                Ok(Prepared::Prompt(p.template.wrap(&self.lm.vocab, &ids, max_len)?))
            }
            Head::Classic(_) => {
                let ids = frame(&self.lm.vocab, text, max_len);
                let pooled = if self.plm_frozen {
                    let mut g = Graph::eval();
                    let h = self.lm.encode(&mut g, &ids, &vec![true; ids.len()])?;
                    let p = pool(&mut g, h, &vec![true; ids.len()])?;
                    Some(g.value(p).to_vec())
                } else {
                    None
                };
                Ok(Prepared::Classic { ids, pooled })
            }
        }
    }

    /// Prepare every text. Call after the freeze state is final, since
    /// classic inputs cache frozen encoder outputs.
    pub fn prepare_all<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Prepared<T>>> {
        texts.iter().map(|t| self.prepare(t.as_ref())).collect()
    }

    /// Class logits for a batch, `b x n`; each row's softmax is the class distribution.
    pub fn logits(&self, g: &mut Graph<T>, batch: &[&Prepared<T>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        match &self.head {
            Head::Prompt(p) => {
                let mut rows = Vec::with_capacity(batch.len());
                for item in batch {
                    let Prepared::Prompt(seq) = item else {
                        return Err(Error::Config("classic input given to a prompt model".into()));
                    };
                    let x = seq.embed(g, &self.lm, p.bank.as_ref())?;
                    let h = self.lm.encode_embeddings(g, x, &seq.attn_mask())?;
                    rows.push(extract_mask_hidden(g, h, seq.mask_index)?);
                }
                let h = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
                let h = g.dropout(h, self.dropout)?;
                match &p.verbalizer {
                    Verbalizer::Manual(v) => {
                        let all: Vec<usize> = (0..batch.len()).collect();
                        let vocab_logits = self.lm.mlm_logits(g, h, &all)?;
                        v.class_logits(g, vocab_logits)
                    }
                    Verbalizer::Soft(v) => v.class_logits(g, &self.lm, h),
                }
            }
            Head::Classic(head) => {
                let mut rows = Vec::with_capacity(batch.len());
                for item in batch {
                    let Prepared::Classic { ids, pooled } = item else {
                        return Err(Error::Config("prompt input given to a classic model".into()));
                    };
                    let row = match pooled {
                        Some(v) if self.plm_frozen => g.constant(1, v.len(), v.clone())?,
                        _ => {
                            let mask = vec![true; ids.len()];
                            let h = self.lm.encode(g, ids, &mask)?;
                            pool(g, h, &mask)?
                        }
                    };
                    rows.push(row);
                }
                let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
                head.logits(g, &self.lm.params, x)
            }
        }
    }

    /// Mean cross-entropy of the batch.
    pub fn loss(&self, g: &mut Graph<T>, batch: &[&Prepared<T>], labels: &[usize]) -> Result<Var> {
        let z = self.logits(g, batch)?;
        g.cross_entropy(z, labels)
    }

    /// Class distributions, evaluated without dropout.
    pub fn predict_proba(&self, items: &[Prepared<T>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(32) {
            let refs: Vec<&Prepared<T>> = chunk.iter().collect();
            let mut g = Graph::eval();
            let z = self.logits(&mut g, &refs)?;
            let p = g.softmax(z)?;
            let n = self.n_classes();
            out.extend(g.value(p).chunks(n).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()));
        }
        Ok(out)
    }
}

impl<T> ParamOwner<T> for Classifier<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.lm.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.lm.params
    }
}
