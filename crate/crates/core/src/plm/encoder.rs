//! Transformer encoder with a masked-language-model decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 128,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_len < 8 {
            return fail(format!("max_len {} must be at least 8", self.max_len));
        }
        if self.vocab_size <= super::vocab::SPECIALS.len() || self.ffn_dim == 0 {
            return fail("vocab_size and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Number of scalars in the encoder and its decoder.
    pub fn param_count(&self) -> usize {
        let (v, m, f, l) = (self.vocab_size, self.hidden_dim, self.ffn_dim, self.max_len);
        let per_layer = 4 * (m * m + m) + 2 * m + (m * f + f) + (f * m + m) + 2 * m;
        v * m + l * m + 2 * m + self.layers * per_layer + v * m + v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Small BERT-style masked language model.
///
/// All encoder and decoder weights live in group `plm` of [`MaskedLm::params`];
/// prompt and head components register their own parameters in the same store.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLm<T> {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore<T>,
    ids: EncoderIds,
}

struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.normal_std(name, shape, INIT_STD)
    }

    /// `std = 1/sqrt(fan_in)` for an `in x out` weight.
    fn scaled(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        let std = 1.0 / (shape[0] as f64).sqrt();
        self.normal_std(name, shape, std)
    }

    fn normal_std(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store
            .add(name, ParamGroup::Plm, Tensor::new(shape, data).expect("shape"))
    }

    fn fill(&mut self, name: String, n: usize, value: f64) -> ParamId {
        self.store.add(
            name,
            ParamGroup::Plm,
            Tensor::new(vec![n], vec![value; n]).expect("shape"),
        )
    }
}

impl<T: Scalar> MaskedLm<T> {
    /// Fresh model: embeddings and decoder `normal(0, 0.02)`, dense layers
    /// `normal(0, 1/sqrt(fan_in))`, unit layer-norm gains and zero biases.
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        // Initialize in f64 so both precisions start from the same draws.
        let mut store64 = ParamStore::<f64>::new();
        let ids = {
            let mut init = Init {
                store: &mut store64,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            let (v, m, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim);
            let tok_emb = init.normal("plm.tok_emb".into(), vec![v, m]);
            let pos_emb = init.normal("plm.pos_emb".into(), vec![config.max_len, m]);
            let emb_ln_g = init.fill("plm.emb_ln.gain".into(), m, 1.0);
            let emb_ln_b = init.fill("plm.emb_ln.bias".into(), m, 0.0);
            let layers = (0..config.layers)
                .map(|l| {
                    let p = |s: &str| format!("plm.layer{l}.{s}");
                    LayerIds {
                        wq: init.scaled(p("wq"), vec![m, m]),
                        bq: init.fill(p("bq"), m, 0.0),
                        wk: init.scaled(p("wk"), vec![m, m]),
                        bk: init.fill(p("bk"), m, 0.0),
                        wv: init.scaled(p("wv"), vec![m, m]),
                        bv: init.fill(p("bv"), m, 0.0),
                        wo: init.scaled(p("wo"), vec![m, m]),
                        bo: init.fill(p("bo"), m, 0.0),
                        ln1_g: init.fill(p("ln1.gain"), m, 1.0),
                        ln1_b: init.fill(p("ln1.bias"), m, 0.0),
                        w1: init.scaled(p("ffn.w1"), vec![m, f]),
                        b1: init.fill(p("ffn.b1"), f, 0.0),
                        w2: init.scaled(p("ffn.w2"), vec![f, m]),
                        b2: init.fill(p("ffn.b2"), m, 0.0),
                        ln2_g: init.fill(p("ln2.gain"), m, 1.0),
                        ln2_b: init.fill(p("ln2.bias"), m, 0.0),
                    }
                })
                .collect();
            let dec_w = init.normal("plm.decoder.weight".into(), vec![v, m]);
            let dec_b = init.fill("plm.decoder.bias".into(), v, 0.0);
            EncoderIds {
                tok_emb,
                pos_emb,
                emb_ln_g,
                emb_ln_b,
                layers,
                dec_w,
                dec_b,
            }
        };
        let mut params = ParamStore::new();
        for (_, p) in store64.iter() {
            let data = p.tensor.data().iter().map(|&x| T::c(x)).collect();
            params.add(
                p.name.clone(),
                p.group,
                Tensor::new(p.tensor.shape().to_vec(), data)?,
            );
        }
        Ok(Self {
            config,
            vocab,
            params,
            ids,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.ids.tok_emb
    }

    pub fn decoder_weight(&self) -> ParamId {
        self.ids.dec_w
    }

    pub fn decoder_bias(&self) -> ParamId {
        self.ids.dec_b
    }

    pub fn position_embeddings(&self) -> ParamId {
        self.ids.pos_emb
    }

    /// Input embedding row of token `id`.
    pub fn token_embedding_row(&self, id: usize) -> &[T] {
        self.params.get(self.ids.tok_emb).tensor.row(id)
    }

    /// Freeze or unfreeze every parameter in group `plm`.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.set_group_frozen(ParamGroup::Plm, frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Plm)
            .all(|(_, p)| p.frozen)
    }

    /// Token embedding lookup, `ids.len() x m`.
    pub fn embed_tokens(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var> {
        g.embedding(&self.params, self.ids.tok_emb, ids)
    }

    /// Encode token ids. `attn_mask[i]` is `true` for real tokens and `false` for padding.
    pub fn encode(&self, g: &mut Graph<T>, ids: &[usize], attn_mask: &[bool]) -> Result<Var> {
        if ids.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        let x = self.embed_tokens(g, ids)?;
        self.encode_embeddings(g, x, attn_mask)
    }

    /// Encode a precomputed `l x m` sequence of input embeddings.
    pub fn encode_embeddings(&self, g: &mut Graph<T>, x: Var, attn_mask: &[bool]) -> Result<Var> {
        let (l, m) = g.shape(x);
        if m != self.config.hidden_dim {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("embedding width {m}, expected {}", self.config.hidden_dim),
            });
        }
        if l > self.config.max_len {
            return Err(Error::TooLong {
                len: l,
                max_len: self.config.max_len,
            });
        }
        if attn_mask.len() != l {
            return Err(Error::Shape {
                op: "encode",
                detail: format!("{l} positions but mask of {}", attn_mask.len()),
            });
        }
        if !attn_mask.iter().any(|&a| a) {
            return Err(Error::Empty("encode (all positions are padding)"));
        }
        let store = &self.params;
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.embedding(store, self.ids.pos_emb, &positions)?;
        let mut h = g.add(x, pos)?;
        let gamma = g.param(store, self.ids.emb_ln_g);
        let beta = g.param(store, self.ids.emb_ln_b);
        h = g.layer_norm(h, gamma, beta, T::c(LN_EPS))?;
        h = g.dropout(h, self.config.dropout)?;

        let score_mask = if attn_mask.iter().all(|&a| a) {
            None
        } else {
            let row: Vec<T> = attn_mask
                .iter()
                .map(|&a| if a { T::zero() } else { T::c(MASKED_SCORE) })
                .collect();
            let data = (0..l).flat_map(|_| row.iter().copied()).collect();
            Some(g.constant(l, l, data)?)
        };

        for layer in &self.ids.layers {
            h = self.layer_forward(g, layer, h, score_mask)?;
        }
        Ok(h)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn layer_forward(&self, g: &mut Graph<T>, p: &LayerIds, x: Var, score_mask: Option<Var>) -> Result<Var> {
        let m = self.config.hidden_dim;
        let dh = m / self.config.heads;
        let scale = T::one() / T::from_usize(dh).expect("usize fits").sqrt();
        let q = self.linear(g, x, p.wq, p.bq)?;
        let k = self.linear(g, x, p.wk, p.bk)?;
        let v = self.linear(g, x, p.wv, p.bv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, s, e)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(mask) = score_mask {
                scores = g.add(scores, mask)?;
            }
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn_out = self.linear(g, cat, p.wo, p.bo)?;
        let attn_out = g.dropout(attn_out, self.config.dropout)?;
        let res = g.add(x, attn_out)?;
        let (g1, b1) = (g.param(&self.params, p.ln1_g), g.param(&self.params, p.ln1_b));
        let x = g.layer_norm(res, g1, b1, T::c(LN_EPS))?;

        let hidden = self.linear(g, x, p.w1, p.b1)?;
        let hidden = g.gelu(hidden);
        let ff = self.linear(g, hidden, p.w2, p.b2)?;
        let ff = g.dropout(ff, self.config.dropout)?;
        let res = g.add(x, ff)?;
        let (g2, b2) = (g.param(&self.params, p.ln2_g), g.param(&self.params, p.ln2_b));
        g.layer_norm(res, g2, b2, T::c(LN_EPS))
    }

    /// Vocabulary logits at the given positions of `hidden` (`positions.len() x |V|`).
    pub fn mlm_logits(&self, g: &mut Graph<T>, hidden: Var, positions: &[usize]) -> Result<Var> {
        let rows = g.gather_rows(hidden, positions)?;
        let w = g.param(&self.params, self.ids.dec_w);
        let b = g.param(&self.params, self.ids.dec_b);
        let logits = g.matmul_t(rows, w)?;
        g.add_row(logits, b)
    }

    pub(crate) fn layer_count(&self) -> usize {
        self.ids.layers.len()
    }

    /// Rebuild handles from a store whose plm parameters follow the naming scheme of [`MaskedLm::new`].
    pub(crate) fn from_store(config: EncoderConfig, vocab: Vocab, params: ParamStore<T>) -> Result<Self> {
        let find = |n: &str| {
            params
                .find(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| find(&format!("plm.layer{l}.{s}"));
                Ok(LayerIds {
                    wq: p("wq")?,
                    bq: p("bq")?,
                    wk: p("wk")?,
                    bk: p("bk")?,
                    wv: p("wv")?,
                    bv: p("bv")?,
                    wo: p("wo")?,
                    bo: p("bo")?,
                    ln1_g: p("ln1.gain")?,
                    ln1_b: p("ln1.bias")?,
                    w1: p("ffn.w1")?,
                    b1: p("ffn.b1")?,
                    w2: p("ffn.w2")?,
                    b2: p("ffn.b2")?,
                    ln2_g: p("ln2.gain")?,
                    ln2_b: p("ln2.bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ids = EncoderIds {
            tok_emb: find("plm.tok_emb")?,
            pos_emb: find("plm.pos_emb")?,
            emb_ln_g: find("plm.emb_ln.gain")?,
            emb_ln_b: find("plm.emb_ln.bias")?,
            layers,
            dec_w: find("plm.decoder.weight")?,
            dec_b: find("plm.decoder.bias")?,
        };
        Ok(Self {
            config,
            vocab,
            params,
            ids,
        })
    }
}

impl<T> crate::autodiff::ParamOwner<T> for MaskedLm<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}
