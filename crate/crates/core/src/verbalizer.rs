//! Mapping mask-position outputs to class distributions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, ParamGroup, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::plm::vocab::{words, Vocab};
use crate::plm::MaskedLm;
use crate::scalar::Scalar;

pub const THETA_INIT_STD: f64 = 0.02;

/// How a manual verbalizer turns token probabilities into a class score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManualScore {
    /// `P(y|x) ∝ exp(mean_{t in V^y} P_M(t|x'))`.
    #[default]
    MeanProb,
    /// `P(y|x) ∝ exp(mean_{t in V^y} log P_M(t|x'))`.
    MeanLogProb,
}

/// Verbalizer section of an experiment config.
///
/// ```toml
/// [verbalizer]
/// soft = false
/// score = "mean_prob"
/// [verbalizer.words]
/// survived = ["recovery"]
/// died = ["death"]
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerbalizerSpec {
    #[serde(default)]
    pub soft: bool,
    #[serde(default)]
    pub score: ManualScore,
    #[serde(default)]
    pub words: BTreeMap<String, Vec<String>>,
}

impl VerbalizerSpec {
    pub fn soft() -> Self {
        Self {
            soft: true,
            ..Self::default()
        }
    }

    pub fn manual<S: AsRef<str>>(pairs: &[(S, &[S])]) -> Self {
        Self {
            words: pairs
                .iter()
                .map(|(c, ws)| (c.as_ref().to_string(), ws.iter().map(|w| w.as_ref().to_string()).collect()))
                .collect(),
            ..Self::default()
        }
    }

    /// Word lists ordered like `class_names`. Missing classes get an empty list.
    pub fn class_words(&self, class_names: &[String]) -> Result<Vec<Vec<String>>> {
        if let Some(extra) = self.words.keys().find(|k| !class_names.contains(k)) {
            return Err(Error::Verbalizer(format!("verbalizer names unknown class {extra:?}")));
        }
        Ok(class_names
            .iter()
            .map(|c| self.words.get(c).cloned().unwrap_or_default())
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerReport {
    /// `(class, word)` pairs whose word is not a single known token.
    pub unknown: Vec<(String, String)>,
    /// Words listed under more than one class, with those classes.
    pub duplicates: Vec<(String, Vec<String>)>,
    pub empty_classes: Vec<String>,
}

impl VerbalizerReport {
    pub fn is_valid(&self) -> bool {
        self.unknown.is_empty() && self.duplicates.is_empty() && self.empty_classes.is_empty()
    }
}

/// Check a class → words mapping against `vocab` without failing.
pub fn validate_verbalizer(class_names: &[String], class_words: &[Vec<String>], vocab: &Vocab) -> VerbalizerReport {
    let mut report = VerbalizerReport::default();
    let mut owners: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (class, ws) in class_names.iter().zip(class_words) {
        if ws.is_empty() {
            report.empty_classes.push(class.clone());
        }
        for w in ws {
            let norm = w.to_lowercase();
            let single = words(&norm).count() == 1;
            if !single || vocab.get(&norm).is_none() {
                report.unknown.push((class.clone(), w.clone()));
            }
            let entry = owners.entry(norm).or_default();
            if !entry.contains(class) {
                entry.push(class.clone());
            }
        }
    }
    report.duplicates = owners.into_iter().filter(|(_, cs)| cs.len() > 1).collect();
    report
}

/// Class distribution from a vocabulary distribution, computed directly from
/// the verbalizer equation.
pub fn manual_probs<T: Scalar>(vocab_probs: &[T], class_tokens: &[Vec<usize>], score: ManualScore) -> Result<Vec<T>> {
    let total: f64 = vocab_probs.iter().map(|p| p.to_f64_lossy()).sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::Verbalizer(format!("vocabulary probabilities sum to {total}")));
    }
    let z = class_tokens
        .iter()
        .enumerate()
        .map(|(c, ids)| {
            if ids.is_empty() {
                return Err(Error::Verbalizer(format!("class {c} has no words")));
            }
            let mut acc = T::zero();
            for &t in ids {
                let p = *vocab_probs.get(t).ok_or(Error::OutOfRange {
                    op: "manual_probs",
                    index: t,
                    len: vocab_probs.len(),
                })?;
                acc += match score {
                    ManualScore::MeanProb => p,
                    ManualScore::MeanLogProb => p.ln(),
                };
            }
            Ok(acc / T::from_usize(ids.len()).expect("usize fits"))
        })
        .collect::<Result<Vec<T>>>()?;
    softmax(&z)
}

/// Class distribution `softmax(theta · h)` for one mask hidden state.
pub fn soft_probs<T: Scalar>(h_mask: &[T], theta: &[T], n_classes: usize) -> Result<Vec<T>> {
    let m = h_mask.len();
    if m == 0 || theta.len() != n_classes * m {
        return Err(Error::Shape {
            op: "soft_probs",
            detail: format!("theta of {} values for {n_classes} classes and width {m}", theta.len()),
        });
    }
    let logits: Vec<T> = theta
        .chunks(m)
        .map(|row| row.iter().zip(h_mask).fold(T::zero(), |a, (&t, &h)| a + t * h))
        .collect();
    softmax(&logits)
}

/// Row `mask_index` of an `l x m` hidden-state matrix, as a `1 x m` node.
pub fn extract_mask_hidden<T: Scalar>(g: &mut Graph<T>, hidden: Var, mask_index: usize) -> Result<Var> {
    let (l, _) = g.shape(hidden);
    if mask_index >= l {
        return Err(Error::OutOfRange {
            op: "extract_mask_hidden",
            index: mask_index,
            len: l,
        });
    }
    g.slice_rows(hidden, mask_index, mask_index + 1)
}

/// Fixed class → token-set mapping over the MLM vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ManualVerbalizer {
    pub class_words: Vec<Vec<String>>,
    pub class_tokens: Vec<Vec<usize>>,
    pub score: ManualScore,
}

impl ManualVerbalizer {
    /// Resolve words against `vocab`; any problem the validator would list is an error.
    pub fn new(class_names: &[String], class_words: Vec<Vec<String>>, vocab: &Vocab, score: ManualScore) -> Result<Self> {
        if class_names.len() != class_words.len() {
            return Err(Error::Verbalizer(format!(
                "{} classes but {} word lists",
                class_names.len(),
                class_words.len()
            )));
        }
        let report = validate_verbalizer(class_names, &class_words, vocab);
        if !report.is_valid() {
            return Err(Error::Verbalizer(describe(&report)));
        }
        let class_tokens = class_words
            .iter()
            .map(|ws| ws.iter().map(|w| vocab.id(&w.to_lowercase())).collect())
            .collect();
        Ok(Self {
            class_words,
            class_tokens,
            score,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_tokens.len()
    }

    /// Averaging operator `A` with `A[t, y] = 1/|V^y|` for `t` in `V^y`.
    fn averaging<T: Scalar>(&self, vocab_len: usize) -> Vec<T> {
        let n = self.n_classes();
        let mut a = vec![T::zero(); vocab_len * n];
        for (y, ids) in self.class_tokens.iter().enumerate() {
            let w = T::one() / T::from_usize(ids.len()).expect("usize fits");
            for &t in ids {
                a[t * n + y] += w;
            }
        }
        a
    }

    /// Class logits (`b x n`) from vocabulary logits (`b x |V|`); the softmax
    /// of each row is the manual-verbalizer class distribution.
    pub fn class_logits<T: Scalar>(&self, g: &mut Graph<T>, vocab_logits: Var) -> Result<Var> {
        let (_, v) = g.shape(vocab_logits);
        let probs = g.softmax(vocab_logits)?;
        let scored = match self.score {
            ManualScore::MeanProb => probs,
            ManualScore::MeanLogProb => g.log(probs),
        };
        let a = g.constant(v, self.n_classes(), self.averaging(v))?;
        g.matmul(scored, a)
    }
}

fn describe(r: &VerbalizerReport) -> String {
    let mut parts = Vec::new();
    if !r.unknown.is_empty() {
        let ws: Vec<String> = r.unknown.iter().map(|(c, w)| format!("{w:?} ({c})")).collect();
        parts.push(format!("unknown words: {}", ws.join(", ")));
    }
    if !r.duplicates.is_empty() {
        let ws: Vec<String> = r
            .duplicates
            .iter()
            .map(|(w, cs)| format!("{w:?} in {}", cs.join("/")))
            .collect();
        parts.push(format!("words in several classes: {}", ws.join(", ")));
    }
    if !r.empty_classes.is_empty() {
        parts.push(format!("classes without words: {}", r.empty_classes.join(", ")));
    }
    parts.join("; ")
}

/// Trainable class embedding matrix `theta` (`n x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftVerbalizer {
    pub id: ParamId,
    pub n_classes: usize,
}

impl SoftVerbalizer {
    pub fn init<T: Scalar>(lm: &mut MaskedLm<T>, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Verbalizer("soft verbalizer needs at least one class".into()));
        }
        let m = lm.hidden_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, THETA_INIT_STD).expect("valid normal");
        let data = (0..n_classes * m).map(|_| T::c(normal.sample(&mut rng))).collect();
        let id = lm
            .params
            .add("verbalizer.theta", ParamGroup::Verbalizer, Tensor::new(vec![n_classes, m], data)?);
        Ok(Self { id, n_classes })
    }

    /// Class logits `h · thetaᵀ` for `b x m` mask states.
    pub fn class_logits<T: Scalar>(&self, g: &mut Graph<T>, lm: &MaskedLm<T>, h_mask: Var) -> Result<Var> {
        let theta = g.param(&lm.params, self.id);
        g.matmul_t(h_mask, theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verbalizer {
    Manual(ManualVerbalizer),
    Soft(SoftVerbalizer),
}

impl Verbalizer {
    /// Build from a config section, registering `theta` in the model store when soft.
    pub fn from_spec<T: Scalar>(spec: &VerbalizerSpec, class_names: &[String], lm: &mut MaskedLm<T>, seed: u64) -> Result<Self> {
        if spec.soft {
            if !spec.words.is_empty() {
                return Err(Error::Verbalizer("a soft verbalizer takes no word lists".into()));
            }
            return Ok(Verbalizer::Soft(SoftVerbalizer::init(lm, class_names.len(), seed)?));
        }
        let ws = spec.class_words(class_names)?;
        Ok(Verbalizer::Manual(ManualVerbalizer::new(class_names, ws, &lm.vocab, spec.score)?))
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, Verbalizer::Soft(_))
    }

    pub fn kind_str(&self) -> &'static str {
        if self.is_soft() {
            "soft"
        } else {
            "manual"
        }
    }
}
