//! Pooled-embedding MLP classifier for the classic fine-tuning path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Depth is `hidden_dims.len() + 1` linear layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpHeadConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for MlpHeadConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dims: vec![64],
            n_classes: 2,
            dropout: 0.1,
            activation: Activation::Relu,
        }
    }
}

impl MlpHeadConfig {
    pub fn depth(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.n_classes))
            .collect()
    }

    /// Σ over layers of `in·out + out`.
    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Mean of the rows of `hidden` whose `attn_mask` entry is `true`.
pub fn pool<T: Scalar>(g: &mut Graph<T>, hidden: Var, attn_mask: &[bool]) -> Result<Var> {
    let (l, _) = g.shape(hidden);
    if attn_mask.len() != l {
        return Err(Error::Shape {
            op: "pool",
            detail: format!("{l} rows but mask of {}", attn_mask.len()),
        });
    }
    let keep: Vec<usize> = (0..l).filter(|&i| attn_mask[i]).collect();
    if keep.is_empty() {
        return Err(Error::Empty("pool (all positions are padding)"));
    }
    let rows = if keep.len() == l { hidden } else { g.gather_rows(hidden, &keep)? };
    Ok(g.mean(rows, Axis::Rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub config: MlpHeadConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl MlpHead {
    /// Register the layers in `store` (group `head`) with the uniform
    /// `±1/sqrt(fan_in)` initialization of common deep-learning libraries.
    pub fn init<T: Scalar>(config: MlpHeadConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect() };
            let weight = Tensor::new(vec![fan_in, out], draw(fan_in * out))?;
            let bias = Tensor::new(vec![out], draw(out))?;
            layers.push((
                store.add(format!("head.layer{i}.weight"), ParamGroup::Head, weight),
                store.add(format!("head.layer{i}.bias"), ParamGroup::Head, bias),
            ));
        }
        Ok(Self { config, layers })
    }

    pub fn layer_ids(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Class logits (`b x n`) for pooled embeddings (`b x m`). Dropout follows
    /// each activation and is active only in training graphs.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, m) = g.shape(x);
        if m != self.config.input_dim {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("embedding width {m}, head expects {}", self.config.input_dim),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.matmul(h, wv)?;
            h = g.add_row(y, bv)?;
            if i < last {
                h = match self.config.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Gelu => g.gelu(h),
                };
                h = g.dropout(h, self.config.dropout)?;
            }
        }
        Ok(h)
    }

    /// Class distribution for one embedding.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, embedding: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::eval();
        let x = g.constant(1, embedding.len(), embedding.to_vec())?;
        let z = self.logits(&mut g, store, x)?;
        let p = g.softmax(z)?;
        Ok(g.value(p).to_vec())
    }

    /// Pre-activation values of every hidden unit for `x`, used to keep
    /// gradient checks away from activation kinks.
    pub fn hidden_preactivations<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::eval();
        let rows = x.len() / self.config.input_dim.max(1);
        let mut h = g.constant(rows, self.config.input_dim, x.to_vec())?;
        let mut out = Vec::new();
        for &(w, b) in &self.layers[..self.layers.len() - 1] {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.matmul(h, wv)?;
            let pre = g.add_row(y, bv)?;
            out.extend_from_slice(g.value(pre));
            h = match self.config.activation {
                Activation::Relu => g.relu(pre),
                Activation::Gelu => g.gelu(pre),
            };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{finite_diff_check, CheckOptions};

    #[test]
    fn param_counts() {
        let big = MlpHeadConfig {
            input_dim: 768,
            hidden_dims: vec![2000],
            n_classes: 7,
            ..MlpHeadConfig::default()
        };
        assert_eq!(big.param_count(), 1_552_007);
        assert_eq!(big.depth(), 2);
        let tiny = MlpHeadConfig {
            input_dim: 2,
            hidden_dims: vec![],
            n_classes: 2,
            ..MlpHeadConfig::default()
        };
        assert_eq!(tiny.param_count(), 6);
        let mut store = ParamStore::<f32>::new();
        MlpHead::init(big.clone(), &mut store, 0).unwrap();
        assert_eq!(store.trainable_count(), 1_552_007);
    }

    #[test]
    fn pooling() {
        let mut g = Graph::<f64>::eval();
        let h = g.constant(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        let p = pool(&mut g, h, &[true, true]).unwrap();
        assert_eq!(g.value(p), &[2.0, 2.0]);
        let single = g.constant(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let p = pool(&mut g, single, &[true]).unwrap();
        assert_eq!(g.value(p), &[0.5, -1.0, 2.0]);
        let padded = g.constant(3, 2, vec![1.0, 3.0, 99.0, -99.0, 3.0, 1.0]).unwrap();
        let p = pool(&mut g, padded, &[true, false, true]).unwrap();
        assert_eq!(g.value(p), &[2.0, 2.0]);
        assert!(pool(&mut g, padded, &[false; 3]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let cfg = MlpHeadConfig {
            input_dim: 4,
            hidden_dims: vec![3],
            n_classes: 5,
            ..MlpHeadConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let head = MlpHead::init(cfg, &mut store, 1).unwrap();
        for (_, p) in store.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let out = head.forward(&store, &[0.3, -2.0, 1.0, 4.0]).unwrap();
        for v in out {
            assert_abs_diff_eq!(v, 0.2, epsilon = 1e-12);
        }
        assert!(head.forward(&store, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn head_gradients_pass_check() {
        let cfg = MlpHeadConfig {
            input_dim: 6,
            hidden_dims: vec![5, 4],
            n_classes: 3,
            dropout: 0.0,
            activation: Activation::Relu,
        };
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        // pick an initialization whose hidden units sit clear of the ReLU kink
        let (mut store, head) = (0..100)
            .map(|seed| {
                let mut s = ParamStore::<f64>::new();
                let h = MlpHead::init(cfg.clone(), &mut s, seed).unwrap();
                (s, h)
            })
            .find(|(s, h)| h.hidden_preactivations(s, &x).unwrap().iter().all(|v| v.abs() > 0.02))
            .unwrap();
        let report = finite_diff_check(
            &mut store,
            |g, s| {
                let xs = g.constant(2, 6, x.clone())?;
                let z = head.logits(g, s, xs)?;
                g.cross_entropy(z, &[2, 0])
            },
            CheckOptions {
                coords_per_param: None,
                ..CheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }

    proptest! {
        #[test]
        fn output_is_a_distribution(x in proptest::collection::vec(-50.0f64..50.0, 8), seed in 0u64..1000) {
            let cfg = MlpHeadConfig { input_dim: 8, hidden_dims: vec![6], n_classes: 4, ..MlpHeadConfig::default() };
            let mut store = ParamStore::<f64>::new();
            let head = MlpHead::init(cfg, &mut store, seed).unwrap();
            let p = head.forward(&store, &x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn pooling_ignores_row_order(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 2..6)) {
            let l = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let rev: Vec<f64> = rows.iter().rev().flatten().copied().collect();
            let mut g = Graph::<f64>::eval();
            let a = g.constant(l, 3, flat).unwrap();
            let b = g.constant(l, 3, rev).unwrap();
            let pa = pool(&mut g, a, &vec![true; l]).unwrap();
            let pb = pool(&mut g, b, &vec![true; l]).unwrap();
            for (x, y) in g.value(pa).iter().zip(g.value(pb)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
