//! AdamW and Adafactor with per-group settings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Adafactor,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Adafactor => "adafactor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step<T: Scalar>(w: &mut [T], grad: &[T], state: &mut AdamState<T>, hp: &AdamWConfig) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
    let lr = T::c(hp.lr);
    let decay = T::one() - lr * T::c(hp.weight_decay);
    let bc1 = T::one() - T::c(hp.beta1.powi(t));
    let bc2 = T::one() - T::c(hp.beta2.powi(t));
    let eps = T::c(hp.eps);
    for i in 0..w.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    pub lr: f64,
    /// Regularizer added to squared gradients.
    pub eps1: f64,
    /// Updates are rescaled so their RMS does not exceed this value.
    pub clip_threshold: f64,
    /// Second-moment decay is `1 - t^-decay_exponent`.
    pub decay_exponent: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            eps1: 1e-30,
            clip_threshold: 1.0,
            decay_exponent: 0.8,
        }
    }
}

/// Second-moment statistics: row/column accumulators for matrices, a full
/// accumulator for vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum AdafactorState<T> {
    Factored {
        rows: usize,
        cols: usize,
        row: Vec<T>,
        col: Vec<T>,
        t: u64,
    },
    Unfactored {
        v: Vec<T>,
        t: u64,
    },
}

impl<T: Scalar> AdafactorState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        if rows > 1 && cols > 1 {
            AdafactorState::Factored {
                rows,
                cols,
                row: vec![T::zero(); rows],
                col: vec![T::zero(); cols],
                t: 0,
            }
        } else {
            AdafactorState::Unfactored {
                v: vec![T::zero(); rows * cols],
                t: 0,
            }
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, AdafactorState::Factored { .. })
    }

    /// Current elementwise second-moment estimate.
    pub fn second_moment(&self) -> Vec<T> {
        match self {
            AdafactorState::Factored {
                rows,
                cols,
                row,
                col,
                ..
            } => {
                let total: T = row.iter().copied().sum();
                let mut out = Vec::with_capacity(rows * cols);
                for &r in row {
                    for &c in col {
                        out.push(if total > T::zero() { r * c / total } else { T::zero() });
                    }
                }
                out
            }
            AdafactorState::Unfactored { v, .. } => v.clone(),
        }
    }
}

/// One Adafactor update: factored second moment, no momentum, fixed step size.
pub fn adafactor_step<T: Scalar>(w: &mut [T], grad: &[T], state: &mut AdafactorState<T>, hp: &AdafactorConfig) {
    let eps1 = T::c(hp.eps1);
    let step = match state {
        AdafactorState::Factored { t, .. } | AdafactorState::Unfactored { t, .. } => {
            *t += 1;
            *t
        }
    };
    let beta = T::one() - T::c((step as f64).powf(-hp.decay_exponent));
    match state {
        AdafactorState::Factored {
            rows,
            cols,
            row,
            col,
            ..
        } => {
            let (r, c) = (*rows, *cols);
            let mut row_sum = vec![T::zero(); r];
            let mut col_sum = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    let sq = grad[i * c + j] * grad[i * c + j] + eps1;
                    row_sum[i] += sq;
                    col_sum[j] += sq;
                }
            }
            for (acc, s) in row.iter_mut().zip(row_sum) {
                *acc = beta * *acc + (T::one() - beta) * s;
            }
            for (acc, s) in col.iter_mut().zip(col_sum) {
                *acc = beta * *acc + (T::one() - beta) * s;
            }
        }
        AdafactorState::Unfactored { v, .. } => {
            for (acc, &g) in v.iter_mut().zip(grad) {
                *acc = beta * *acc + (T::one() - beta) * (g * g + eps1);
            }
        }
    }
    let v_hat = state.second_moment();
    let mut update: Vec<T> = grad
        .iter()
        .zip(&v_hat)
        .map(|(&g, &v)| if v > T::zero() { g / v.sqrt() } else { T::zero() })
        .collect();
    let n = T::from_usize(update.len().max(1)).expect("usize fits");
    let rms = (update.iter().map(|&u| u * u).sum::<T>() / n).sqrt();
    let denom = T::one().max(rms / T::c(hp.clip_threshold));
    let lr = T::c(hp.lr);
    for (wi, u) in w.iter_mut().zip(update.iter_mut()) {
        *u /= denom;
        *wi -= lr * *u;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
enum OptState<T> {
    Adam(AdamState<T>),
    Adafactor(AdafactorState<T>),
}

/// Applies each group's optimizer to its non-frozen parameters.
#[derive(Debug, Clone)]
pub struct GroupOptimizer<T> {
    settings: BTreeMap<ParamGroup, GroupSettings>,
    states: HashMap<ParamId, OptState<T>>,
    lr_scale: f64,
}

impl<T: Scalar> GroupOptimizer<T> {
    pub fn new(settings: BTreeMap<ParamGroup, GroupSettings>) -> Self {
        Self {
            settings,
            states: HashMap::new(),
            lr_scale: 1.0,
        }
    }

    /// Multiply every group's learning rate by `scale` from the next step on.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Fails if a trainable group in `store` has no settings.
    pub fn check_coverage(&self, store: &ParamStore<T>) -> Result<()> {
        for group in store.trainable_groups() {
            if !self.settings.contains_key(&group) {
                return Err(Error::Config(format!("no optimizer configured for group {group}")));
            }
        }
        Ok(())
    }

    /// Update every non-frozen parameter holding a gradient. Returns the
    /// number of scalars updated.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<usize> {
        self.check_coverage(store)?;
        let mut updated = 0;
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let mut settings = self.settings[&p.group];
            settings.lr *= self.lr_scale;
            let (rows, cols) = p.tensor.as_matrix();
            let (data, grad) = p.tensor.parts_mut();
            let Some(grad) = grad else { continue };
            let grad = grad.to_vec();
            let state = self.states.entry(id).or_insert_with(|| match settings.optimizer {
                OptimizerKind::Adamw => OptState::Adam(AdamState::new(rows * cols)),
                OptimizerKind::Adafactor => OptState::Adafactor(AdafactorState::new(rows, cols)),
            });
            match state {
                OptState::Adam(s) => adamw_step(
                    data,
                    &grad,
                    s,
                    &AdamWConfig {
                        lr: settings.lr,
                        weight_decay: settings.weight_decay,
                        ..AdamWConfig::default()
                    },
                ),
                OptState::Adafactor(s) => adafactor_step(
                    data,
                    &grad,
                    s,
                    &AdafactorConfig {
                        lr: settings.lr,
                        ..AdafactorConfig::default()
                    },
                ),
            }
            updated += rows * cols;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn adamw_zero_gradient_no_decay_is_a_no_op() {
        let mut w = vec![0.5f64, -1.5];
        let mut s = AdamState::new(2);
        let hp = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut w, &[0.0, 0.0], &mut s, &hp);
        }
        assert_eq!(w, vec![0.5, -1.5]);
    }

    #[test]
    fn adamw_descends_on_a_square() {
        let mut w = vec![1.0f64];
        let mut s = AdamState::new(1);
        let hp = AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        };
        let g = [2.0 * w[0]];
        adamw_step(&mut w, &g, &mut s, &hp);
        assert!(w[0] < 1.0);
    }

    #[test]
    fn adamw_matches_hand_computed_updates() {
        // Two steps on w = (1, -2) with gradients g1 = (0.5, -1), g2 = (0.1, 0.3),
        // lr 0.1, wd 0.01, betas (0.9, 0.999), eps 1e-8.
        //
        // step 1: m = 0.1 g1, v = 0.001 g1^2, m_hat = g1, v_hat = g1^2,
        //         w <- w (1 - 0.001) - 0.1 sign(g1)
        //         = (0.999 - 0.1, -1.998 + 0.1) = (0.899, -1.898)  (eps negligible)
        let mut w = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        let hp = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        adamw_step(&mut w, &[0.5, -1.0], &mut s, &hp);
        assert_abs_diff_eq!(w[0], 0.899, epsilon = 1e-7);
        assert_abs_diff_eq!(w[1], -1.898, epsilon = 1e-7);

        // step 2, coordinate 0:
        //   m = 0.9*0.05 + 0.1*0.1 = 0.055, m_hat = 0.055 / 0.19
        //   v = 0.999*0.00025 + 0.001*0.01 = 0.00025975, v_hat = v / 0.001999
        //   w = 0.899*0.999 - 0.1 * m_hat / (sqrt(v_hat) + 1e-8)
        let m_hat = 0.055 / 0.19;
        let v_hat = 0.000_259_75 / (1.0 - 0.999f64.powi(2));
        let w1 = [0.999 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 * 0.999 + 0.1 * 1.0 / (1.0 + 1e-8)];
        let expected0 = w1[0] * 0.999 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        // coordinate 1:
        //   m = 0.9*(-0.1) + 0.1*0.3 = -0.06
        //   v = 0.999*0.001 + 0.001*0.09 = 0.001089
        let m_hat1 = -0.06 / 0.19;
        let v_hat1 = 0.001_089 / (1.0 - 0.999f64.powi(2));
        let expected1 = w1[1] * 0.999 - 0.1 * m_hat1 / (v_hat1.sqrt() + 1e-8);
        adamw_step(&mut w, &[0.1, 0.3], &mut s, &hp);
        assert_abs_diff_eq!(w[0], expected0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], expected1, epsilon = 1e-12);
    }

    #[test]
    fn adafactor_vector_uses_unfactored_rms_update() {
        let hp = AdafactorConfig {
            lr: 0.01,
            ..AdafactorConfig::default()
        };
        let mut state = AdafactorState::<f64>::new(1, 3);
        assert!(!state.is_factored());
        let mut w = vec![1.0, 2.0, 3.0];
        let grads = [[0.3, -0.2, 0.1], [0.05, 0.4, -0.3]];
        let mut v = [0.0f64; 3];
        let mut expected = w.clone();
        for (t, g) in grads.iter().enumerate() {
            adafactor_step(&mut w, g, &mut state, &hp);
            let beta = 1.0 - ((t + 1) as f64).powf(-0.8);
            for i in 0..3 {
                v[i] = beta * v[i] + (1.0 - beta) * (g[i] * g[i] + 1e-30);
            }
            let u: Vec<f64> = (0..3).map(|i| g[i] / v[i].sqrt()).collect();
            let rms = (u.iter().map(|x| x * x).sum::<f64>() / 3.0).sqrt();
            for i in 0..3 {
                expected[i] -= 0.01 * u[i] / rms.max(1.0);
            }
            assert_eq!(w, expected);
        }
    }

    #[test]
    fn adafactor_rank_one_second_moment_matches_full() {
        // Full second-moment oracle on a 3x3 parameter driven by one fixed
        // rank-one gradient g = a b^T.
        let a = [0.5f64, -1.0, 2.0];
        let b = [1.5f64, 0.25, -0.75];
        let g: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
        let hp = AdafactorConfig {
            eps1: 0.0,
            ..AdafactorConfig::default()
        };
        let mut state = AdafactorState::<f64>::new(3, 3);
        assert!(state.is_factored());
        let mut w = vec![0.0; 9];
        let mut full = vec![0.0; 9];
        for t in 1..=4 {
            adafactor_step(&mut w, &g, &mut state, &hp);
            let beta = 1.0 - (t as f64).powf(-0.8);
            for (f, gi) in full.iter_mut().zip(&g) {
                *f = beta * *f + (1.0 - beta) * gi * gi;
            }
            for (est, f) in state.second_moment().iter().zip(&full) {
                assert_abs_diff_eq!(*est, *f, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn adafactor_zero_gradient_keeps_parameter() {
        let hp = AdafactorConfig::default();
        for (r, c) in [(3, 4), (1, 5)] {
            let mut state = AdafactorState::<f64>::new(r, c);
            let mut w: Vec<f64> = (0..r * c).map(|i| i as f64).collect();
            let before = w.clone();
            adafactor_step(&mut w, &vec![0.0; r * c], &mut state, &hp);
            assert_eq!(w, before);
        }
    }

    #[test]
    fn group_optimizer_skips_frozen_and_requires_coverage() {
        let mut store = ParamStore::<f64>::new();
        let plm = store.add("plm.w", ParamGroup::Plm, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let head = store.add("head.w", ParamGroup::Head, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        store.get_mut(plm).frozen = true;
        for id in [plm, head] {
            store.get_mut(id).tensor.grad_mut().copy_from_slice(&[1.0, -1.0]);
        }
        let mut opt = GroupOptimizer::new(BTreeMap::from([(
            ParamGroup::Head,
            GroupSettings {
                optimizer: OptimizerKind::Adamw,
                lr: 0.1,
                weight_decay: 0.0,
            },
        )]));
        let before = store.get(plm).tensor.data().to_vec();
        for _ in 0..10 {
            assert_eq!(opt.step(&mut store).unwrap(), 2);
        }
        assert_eq!(store.get(plm).tensor.data(), before.as_slice());
        assert_ne!(store.get(head).tensor.data(), &[1.0, 2.0]);

        store.get_mut(plm).frozen = false;
        assert!(matches!(opt.step(&mut store), Err(Error::Config(_))));
    }
}
