//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node holds a `rows x cols` value. Vectors are `1 x n` rows and
//! scalars are `1 x 1`. A graph is built fresh for each forward pass and
//! consumed by a single call to [`Graph::backward`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Softmax(Var),
    Log(Var),
    Mean(Var, Axis),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of leaf nodes created with `requires_grad = true`.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(&var.0).map(Vec::as_slice)
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::eval()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph with dropout disabled.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
            consumed: false,
        }
    }

    /// Graph with dropout active, drawing masks from a generator seeded with `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            consumed: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn row(&self, v: Var, i: usize) -> &[T] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let (rows, cols) = self.shape(v);
        if rows * cols != 1 {
            return Err(Error::NotScalar { rows, cols });
        }
        Ok(self.nodes[v.0].value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input or differentiable leaf.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{rows}x{cols} with {} values", data.len()),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// Bring a parameter into the graph. Frozen parameters enter as constants.
    ///
    /// Each parameter is copied in at most once per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let (rows, cols) = p.tensor.as_matrix();
        let v = self.push(rows, cols, p.tensor.data().to_vec(), Op::Param(id), !p.frozen);
        self.params.insert(id, v);
        v
    }

    /// Row lookup into a parameter table (`V x m`), producing `ids.len() x m`.
    pub fn embedding(&mut self, store: &ParamStore<T>, table: ParamId, ids: &[usize]) -> Result<Var> {
        let (v, _) = store.get(table).tensor.as_matrix();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfRange {
                op: "embedding",
                index: bad,
                len: v,
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        let t = self.param(store, table);
        self.gather_rows(t, ids)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{r}x{k} * {k2}x{c}"),
            });
        }
        let mut out = vec![T::zero(); r * c];
        T::gemm(
            r,
            k,
            c,
            T::one(),
            &self.nodes[a.0].value,
            k as isize,
            1,
            &self.nodes[b.0].value,
            c as isize,
            1,
            T::zero(),
            &mut out,
            c as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` with `a: r x k`, `b: c x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (c, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                detail: format!("{r}x{k} * ({c}x{k2})^T"),
            });
        }
        let mut out = vec![T::zero(); r * c];
        T::gemm(
            r,
            k,
            c,
            T::one(),
            &self.nodes[a.0].value,
            k as isize,
            1,
            &self.nodes[b.0].value,
            1,
            k as isize,
            T::zero(),
            &mut out,
            c as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    /// Add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("{r}x{c} + {:?}", self.shape(row)),
            });
        }
        let bias = &self.nodes[row.0].value;
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(&x, &b)| x + b))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(r, c, out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| gelu_parts(x).0).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Gelu(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(Error::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(ids.len(), c, out, Op::Gather(a, ids.to_vec()), rg))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("input {r}x{c}, gain {:?}, bias {:?}", self.shape(gamma), self.shape(beta)),
            });
        }
        let n = T::from_usize(c).expect("usize fits");
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval graphs or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if p == 0.0 {
            return Ok(a);
        }
        let (r, c) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::Dropout(a, mask), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row)?;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, c, out, Op::Softmax(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|&x| x.ln()).collect();
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Log(a), rg)
    }

    /// Mean over rows (giving `1 x c`) or over columns (giving `r x 1`).
    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.shape(a);
        let v = &self.nodes[a.0].value;
        let (rows, cols, out) = match axis {
            Axis::Rows => {
                let n = T::from_usize(r).expect("usize fits");
                let mut out = vec![T::zero(); c];
                for chunk in v.chunks(c) {
                    for (o, &x) in out.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n);
                (1, c, out)
            }
            Axis::Cols => {
                let n = T::from_usize(c).expect("usize fits");
                let out = v.chunks(c).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
                (r, 1, out)
            }
        };
        let rg = self.rg(&[a]);
        self.push(rows, cols, out, Op::Mean(a, axis), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let c = self.shape(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts {c} and {pc}"),
                });
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let r = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {r} and {pr}"),
                });
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let n = &self.nodes[p.0];
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::OutOfRange {
                op: "slice_rows",
                index: end,
                len: r,
            });
        }
        let out = self.nodes[a.0].value[start * c..end * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::OutOfRange {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let v = &self.nodes[a.0].value;
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + end].iter().copied()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(r, end - start, out, Op::SliceCols(a, start), rg))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("{r} rows but {} targets", targets.len()),
            });
        }
        let mut probs = self.nodes[logits.0].value.clone();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            if y >= c {
                return Err(Error::OutOfRange {
                    op: "cross_entropy",
                    index: y,
                    len: c,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let n = T::from_usize(r).expect("usize fits");
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss / n],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Parameter gradients are accumulated into `store`; leaf gradients are returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let (rows, cols) = self.shape(loss);
        if rows * cols != 1 {
            return Err(Error::NotScalar { rows, cols });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = Gradients {
            leaves: HashMap::new(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(leaves);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {
                    leaves.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    let acc = store.get_mut(*id).tensor.grad_mut();
                    for (a, &x) in acc.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (_, k) = self.shape(*a);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, r * k);
                        T::gemm(
                            r,
                            c,
                            k,
                            T::one(),
                            &g,
                            c as isize,
                            1,
                            &self.nodes[b.0].value,
                            1,
                            c as isize,
                            T::one(),
                            da,
                            k as isize,
                            1,
                        );
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut grads, *b, k * c);
                        T::gemm(
                            k,
                            r,
                            c,
                            T::one(),
                            &self.nodes[a.0].value,
                            1,
                            k as isize,
                            &g,
                            c as isize,
                            1,
                            T::one(),
                            db,
                            c as isize,
                            1,
                        );
                    }
                }
                Op::MatMulT(a, b) => {
                    let (_, k) = self.shape(*a);
                    if self.nodes[a.0].requires_grad {
                        let da = slot(&mut grads, *a, r * k);
                        T::gemm(
                            r,
                            c,
                            k,
                            T::one(),
                            &g,
                            c as isize,
                            1,
                            &self.nodes[b.0].value,
                            k as isize,
                            1,
                            T::one(),
                            da,
                            k as isize,
                            1,
                        );
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = slot(&mut grads, *b, c * k);
                        T::gemm(
                            c,
                            r,
                            k,
                            T::one(),
                            &g,
                            1,
                            c as isize,
                            &self.nodes[a.0].value,
                            k as isize,
                            1,
                            T::one(),
                            db,
                            k as isize,
                            1,
                        );
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.nodes[v.0].requires_grad {
                            add_into(slot(&mut grads, v, r * c), &g);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[a.0].requires_grad {
                        add_into(slot(&mut grads, *a, r * c), &g);
                    }
                    if self.nodes[row.0].requires_grad {
                        let db = slot(&mut grads, *row, c);
                        for chunk in g.chunks(c) {
                            add_into(db, chunk);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let bv = &self.nodes[b.0].value;
                        let da = slot(&mut grads, a, r * c);
                        for ((d, &gi), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * y;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = &self.nodes[a.0].value;
                        let db = slot(&mut grads, b, r * c);
                        for ((d, &gi), &x) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * x;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let da = slot(&mut grads, *a, r * c);
                    for (d, &gi) in da.iter_mut().zip(&g) {
                        *d += gi * *s;
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = slot(&mut grads, *a, r * c);
                    for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(av) {
                        if x > T::zero() {
                            *d += gi;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = slot(&mut grads, *a, r * c);
                    for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(av) {
                        *d += gi * gelu_parts(x).1;
                    }
                }
                Op::Gather(a, ids) => {
                    let src_len = self.nodes[a.0].value.len();
                    let da = slot(&mut grads, *a, src_len);
                    for (chunk, &id) in g.chunks(c).zip(ids) {
                        add_into(&mut da[id * c..(id + 1) * c], chunk);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = &self.nodes[gamma.0].value;
                    if self.nodes[x.0].requires_grad {
                        let n = T::from_usize(c).expect("usize fits");
                        let dx = slot(&mut grads, *x, r * c);
                        let mut dxhat = vec![T::zero(); c];
                        for i in 0..r {
                            let gr = &g[i * c..(i + 1) * c];
                            let hr = &xhat[i * c..(i + 1) * c];
                            for j in 0..c {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let mean_d = dxhat.iter().copied().sum::<T>() / n;
                            let mean_dh = dxhat.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / n;
                            for j in 0..c {
                                dx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                            }
                        }
                    }
                    if self.nodes[gamma.0].requires_grad {
                        let dg = slot(&mut grads, *gamma, c);
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if self.nodes[beta.0].requires_grad {
                        let db = slot(&mut grads, *beta, c);
                        for gr in g.chunks(c) {
                            add_into(db, gr);
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let da = slot(&mut grads, *a, r * c);
                    for ((d, &gi), &m) in da.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                }
                Op::Softmax(a) => {
                    let p = &self.nodes[i].value;
                    let da = slot(&mut grads, *a, r * c);
                    for ((dr, gr), pr) in da.chunks_mut(c).zip(g.chunks(c)).zip(p.chunks(c)) {
                        let dot: T = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                        for j in 0..c {
                            dr[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    let da = slot(&mut grads, *a, r * c);
                    for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(av) {
                        *d += gi / x;
                    }
                }
                Op::Mean(a, axis) => {
                    let (ar, ac) = self.shape(*a);
                    let da = slot(&mut grads, *a, ar * ac);
                    match axis {
                        Axis::Rows => {
                            let n = T::from_usize(ar).expect("usize fits");
                            for dr in da.chunks_mut(ac) {
                                for (d, &gi) in dr.iter_mut().zip(&g) {
                                    *d += gi / n;
                                }
                            }
                        }
                        Axis::Cols => {
                            let n = T::from_usize(ac).expect("usize fits");
                            for (dr, &gi) in da.chunks_mut(ac).zip(&g) {
                                dr.iter_mut().for_each(|d| *d += gi / n);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    let da = slot(&mut grads, *a, len);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.nodes[p.0].requires_grad {
                            add_into(slot(&mut grads, *p, len), &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].cols;
                        if self.nodes[p.0].requires_grad {
                            let dp = slot(&mut grads, *p, r * pc);
                            for row in 0..r {
                                add_into(
                                    &mut dp[row * pc..(row + 1) * pc],
                                    &g[row * c + offset..row * c + offset + pc],
                                );
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let len = self.nodes[a.0].value.len();
                    let da = slot(&mut grads, *a, len);
                    add_into(&mut da[start * c..(start + r) * c], &g);
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let da = slot(&mut grads, *a, ar * ac);
                    for row in 0..r {
                        add_into(
                            &mut da[row * ac + start..row * ac + start + c],
                            &g[row * c..(row + 1) * c],
                        );
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (lr, lc) = self.shape(*logits);
                    let scale = g[0] / T::from_usize(lr).expect("usize fits");
                    let dl = slot(&mut grads, *logits, lr * lc);
                    for (row, (pr, &y)) in probs.chunks(lc).zip(targets).enumerate() {
                        for j in 0..lc {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            dl[row * lc + j] += scale * (pr[j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(leaves)
    }
}

/// GELU value and derivative at `x`.
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let half = T::c(0.5);
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044_715);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let d_inner = k * (T::one() + T::c(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner;
    (value, deriv)
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of a single vector, in place.
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("softmax"));
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
    Ok(())
}

/// Softmax of a vector.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}
