//! Template strings, soft prompt tokens and prompt wrapping.
//!
//! Grammar:
//!
//! ```text
//! {text}              the input placeholder (exactly once)
//! {mask}              the mask slot (exactly once)
//! {soft:"w1 w2 .."}   one soft token per word, initialized from that word's embedding
//! {soft}              one uninitialized soft token
//! anything else       literal text
//! ```

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::plm::vocab::{words, Vocab, CLS, MASK, SEP};
use crate::plm::MaskedLm;
use crate::scalar::Scalar;

pub const SOFT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Literal,
    InputPlaceholder,
    Mask,
    Soft,
}

/// One piece of a template. Soft segments stand for exactly one soft token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemplateSegment {
    pub kind: SegmentKind,
    pub text: Option<String>,
}

impl TemplateSegment {
    pub fn literal(text: impl Into<String>) -> Self {
        Self {
            kind: SegmentKind::Literal,
            text: Some(text.into()),
        }
    }

    pub fn input() -> Self {
        Self {
            kind: SegmentKind::InputPlaceholder,
            text: None,
        }
    }

    pub fn mask() -> Self {
        Self {
            kind: SegmentKind::Mask,
            text: None,
        }
    }

    pub fn soft(init: Option<String>) -> Self {
        Self {
            kind: SegmentKind::Soft,
            text: init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Manual,
    Soft,
    Mixed,
}

impl TemplateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Manual => "manual",
            TemplateKind::Soft => "soft",
            TemplateKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Template {
    segments: Vec<TemplateSegment>,
}

impl Template {
    /// Validate a segment list directly.
    pub fn from_segments(segments: Vec<TemplateSegment>) -> Result<Self> {
        let count = |k| segments.iter().filter(|s| s.kind == k).count();
        match count(SegmentKind::Mask) {
            1 => {}
            0 => return Err(Error::Template("template has no {mask}".into())),
            n => return Err(Error::Template(format!("template has {n} {{mask}} slots; exactly one is allowed"))),
        }
        match count(SegmentKind::InputPlaceholder) {
            1 => {}
            0 => return Err(Error::Template("template has no {text} placeholder".into())),
            n => return Err(Error::Template(format!("template has {n} {{text}} placeholders; exactly one is allowed"))),
        }
        for s in &segments {
            match s.kind {
                SegmentKind::Literal if s.text.as_deref().is_none_or(|t| t.trim().is_empty()) => {
                    return Err(Error::Template("empty literal segment".into()));
                }
                SegmentKind::Mask | SegmentKind::InputPlaceholder if s.text.is_some() => {
                    return Err(Error::Template("mask and input segments carry no text".into()));
                }
                SegmentKind::Soft if s.text.as_deref().is_some_and(|t| words(t).count() != 1) => {
                    return Err(Error::Template(format!(
                        "soft segment init {:?} must be a single word",
                        s.text.as_deref().unwrap_or_default()
                    )));
                }
                _ => {}
            }
        }
        Ok(Self { segments })
    }

    pub fn parse(dsl: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let flush = |literal: &mut String, segments: &mut Vec<TemplateSegment>| {
            let t = literal.trim();
            if !t.is_empty() {
                segments.push(TemplateSegment::literal(t));
            }
            literal.clear();
        };
        let mut rest = dsl;
        while let Some(c) = rest.chars().next() {
            match c {
                '{' => {
                    let close = rest
                        .find('}')
                        .ok_or_else(|| Error::Template(format!("unbalanced '{{' in {dsl:?}")))?;
                    let tag = &rest[1..close];
                    if tag.contains('{') {
                        return Err(Error::Template(format!("nested '{{' in {dsl:?}")));
                    }
                    flush(&mut literal, &mut segments);
                    parse_tag(tag, &mut segments)?;
                    rest = &rest[close + 1..];
                }
                '}' => return Err(Error::Template(format!("unbalanced '}}' in {dsl:?}"))),
                _ => {
                    literal.push(c);
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        flush(&mut literal, &mut segments);
        Self::from_segments(segments)
    }

    pub fn segments(&self) -> &[TemplateSegment] {
        &self.segments
    }

    pub fn kind(&self) -> TemplateKind {
        let soft = self.soft_count();
        let literal = self.segments.iter().filter(|s| s.kind == SegmentKind::Literal).count();
        match (soft, literal) {
            (0, _) => TemplateKind::Manual,
            (_, 0) => TemplateKind::Soft,
            _ => TemplateKind::Mixed,
        }
    }

    /// Number of soft token positions.
    pub fn soft_count(&self) -> usize {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Soft).count()
    }

    /// Init word of each soft position, in order.
    pub fn soft_sources(&self) -> Vec<Option<String>> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Soft)
            .map(|s| s.text.clone())
            .collect()
    }

    /// Tokens contributed by the template itself, including `[CLS]`, `[SEP]` and the mask.
    pub fn scaffold_len(&self) -> usize {
        2 + self
            .segments
            .iter()
            .map(|s| match s.kind {
                SegmentKind::Literal => words(s.text.as_deref().unwrap_or_default()).count(),
                SegmentKind::Mask | SegmentKind::Soft => 1,
                SegmentKind::InputPlaceholder => 0,
            })
            .sum::<usize>()
    }

    /// Lay out `[CLS] segments.. [SEP]` for one tokenized input, trimming the
    /// input's tail when the result would exceed `max_len`.
    pub fn wrap(&self, vocab: &Vocab, input: &[usize], max_len: usize) -> Result<PromptedSequence> {
        let scaffold = self.scaffold_len();
        if scaffold > max_len {
            return Err(Error::TooLong { len: scaffold, max_len });
        }
        let keep = input.len().min(max_len - scaffold);
        let mut pieces = Vec::new();
        let mut tokens = vec![CLS];
        let mut soft_next = 0;
        let mut mask_index = 0;
        let mut len = 1;
        for s in &self.segments {
            match s.kind {
                SegmentKind::Literal => {
                    let ids = vocab.tokenize(s.text.as_deref().unwrap_or_default());
                    len += ids.len();
                    tokens.extend(ids);
                }
                SegmentKind::InputPlaceholder => {
                    tokens.extend_from_slice(&input[..keep]);
                    len += keep;
                }
                SegmentKind::Mask => {
                    mask_index = len;
                    tokens.push(MASK);
                    len += 1;
                }
                SegmentKind::Soft => {
                    if !tokens.is_empty() {
                        pieces.push(Piece::Tokens(std::mem::take(&mut tokens)));
                    }
                    match pieces.last_mut() {
                        Some(Piece::Soft { end, .. }) if *end == soft_next => *end += 1,
                        _ => pieces.push(Piece::Soft {
                            start: soft_next,
                            end: soft_next + 1,
                        }),
                    }
                    soft_next += 1;
                    len += 1;
                }
            }
        }
        tokens.push(SEP);
        len += 1;
        pieces.push(Piece::Tokens(tokens));
        debug_assert!(len <= max_len);
        Ok(PromptedSequence {
            pieces,
            mask_index,
            len,
        })
    }
}

fn parse_tag(tag: &str, segments: &mut Vec<TemplateSegment>) -> Result<()> {
    let tag = tag.trim();
    match tag {
        "text" => segments.push(TemplateSegment::input()),
        "mask" => segments.push(TemplateSegment::mask()),
        "soft" => segments.push(TemplateSegment::soft(None)),
        _ => {
            let Some(phrase) = tag.strip_prefix("soft:") else {
                return Err(Error::Template(format!("unknown tag {{{tag}}}")));
            };
            let phrase = phrase.trim();
            let inner = phrase
                .strip_prefix('"')
                .and_then(|p| p.strip_suffix('"'))
                .filter(|p| !p.contains('"'))
                .ok_or_else(|| Error::Template(format!("soft phrase must be double-quoted: {{{tag}}}")))?;
            let ws: Vec<String> = words(inner).collect();
            if ws.is_empty() {
                return Err(Error::Template(format!("empty soft phrase in {{{tag}}}")));
            }
            segments.extend(ws.into_iter().map(|w| TemplateSegment::soft(Some(w))));
        }
    }
    Ok(())
}

impl fmt::Display for Template {
    /// Canonical form: consecutive initialized soft tokens share one tag.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        let mut phrase: Vec<&str> = Vec::new();
        let close = |phrase: &mut Vec<&str>, parts: &mut Vec<String>| {
            if !phrase.is_empty() {
                parts.push(format!("{{soft:\"{}\"}}", phrase.join(" ")));
                phrase.clear();
            }
        };
        for s in &self.segments {
            match (s.kind, s.text.as_deref()) {
                (SegmentKind::Soft, Some(w)) => {
                    phrase.push(w);
                    continue;
                }
                _ => close(&mut phrase, &mut parts),
            }
            parts.push(match s.kind {
                SegmentKind::Literal => s.text.clone().unwrap_or_default(),
                SegmentKind::InputPlaceholder => "{text}".into(),
                SegmentKind::Mask => "{mask}".into(),
                SegmentKind::Soft => "{soft}".into(),
            });
        }
        close(&mut phrase, &mut parts);
        f.write_str(&parts.join(" "))
    }
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Trainable `k x m` embeddings for the soft positions of one template.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTokenBank {
    pub id: ParamId,
    pub init_sources: Vec<Option<String>>,
}

impl SoftTokenBank {
    /// Register a bank for `template` in the model's store (group `template`).
    ///
    /// Rows with an init word copy that word's current input embedding; the
    /// rest are drawn from `normal(0, 0.02)`.
    pub fn init<T: Scalar>(template: &Template, lm: &mut MaskedLm<T>, seed: u64) -> Result<Self> {
        let sources = template.soft_sources();
        if sources.is_empty() {
            return Err(Error::Template(format!("template {template} has no soft tokens")));
        }
        let m = lm.hidden_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, SOFT_INIT_STD).expect("valid normal");
        let mut data = Vec::with_capacity(sources.len() * m);
        for src in &sources {
            match src {
                Some(w) => {
                    let id = lm
                        .vocab
                        .get(&w.to_lowercase())
                        .ok_or_else(|| Error::UnknownWord(w.clone()))?;
                    data.extend_from_slice(lm.token_embedding_row(id));
                }
                None => data.extend((0..m).map(|_| T::c(normal.sample(&mut rng)))),
            }
        }
        let tensor = Tensor::new(vec![sources.len(), m], data)?;
        let id = lm.params.add("template.soft", ParamGroup::Template, tensor);
        Ok(Self {
            id,
            init_sources: sources,
        })
    }

    pub fn len(&self) -> usize {
        self.init_sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.init_sources.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Tokens(Vec<usize>),
    /// Rows `start..end` of the soft token bank.
    Soft { start: usize, end: usize },
}

/// A wrapped input: the layout of `[CLS] .. [SEP]` with the mask position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedSequence {
    pub pieces: Vec<Piece>,
    pub mask_index: usize,
    pub len: usize,
}

impl PromptedSequence {
    /// No padding is ever produced, so every position attends.
    pub fn attn_mask(&self) -> Vec<bool> {
        vec![true; self.len]
    }

    /// Token ids by position; soft positions are `None`.
    pub fn token_view(&self) -> Vec<Option<usize>> {
        self.pieces
            .iter()
            .flat_map(|p| match p {
                Piece::Tokens(ids) => ids.iter().map(|&i| Some(i)).collect::<Vec<_>>(),
                Piece::Soft { start, end } => vec![None; end - start],
            })
            .collect()
    }

    pub fn soft_count(&self) -> usize {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Soft { start, end } => end - start,
                Piece::Tokens(_) => 0,
            })
            .sum()
    }

    /// The `len x m` input embedding matrix.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, lm: &MaskedLm<T>, bank: Option<&SoftTokenBank>) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.pieces.len());
        for p in &self.pieces {
            match p {
                Piece::Tokens(ids) => parts.push(lm.embed_tokens(g, ids)?),
                Piece::Soft { start, end } => {
                    let bank = bank.ok_or_else(|| Error::Template("soft positions need a soft token bank".into()))?;
                    let rows = g.param(&lm.params, bank.id);
                    parts.push(g.slice_rows(rows, *start, *end)?);
                }
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }
}
