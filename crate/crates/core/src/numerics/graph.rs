//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Each node keeps
//! its value; [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products. Nodes that do not depend on any parameter or
//! gradient-carrying leaf are marked constant and skipped during the reverse
//! sweep.
//!
//! All operations work on rank-2 tensors (`rows x cols`). Shape errors are
//! programming errors and panic; callers validate user-facing inputs before
//! building the graph.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;

/// Layer-normalization variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Recip(Var),
    Element(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Rc<[usize]>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single forward pass recording.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_count: usize,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    param_count: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn into_param_grads(mut self) -> Grads {
        let mut grads = Grads::with_len(self.param_count);
        for (id, var) in &self.params {
            if let Some(g) = self.node_grads[var.0].take() {
                grads.set(*id, g);
            }
        }
        grads
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `(rows, cols)` of a node's value.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (queried through [`Gradients::wrt`]).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter node; repeated requests for the same id share one node so
    /// gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        self.param_count = self.param_count.max(store.len());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt {m}x{k} by ({n}x{k2})^T");
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMulBT(a, b), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "elementwise shape mismatch");
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(r, c, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(b), (1, c), "add_row bias shape");
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Tensor::matrix(r, c, data), Op::AddRow(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data), Op::Scale(x, s), rg)
    }

    /// Multiplies `x` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.dims(s), (1, 1), "mul_scalar needs a 1x1 scale");
        let sv = self.scalar(s);
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(Tensor::matrix(r, c, data), Op::MulScalar(x, s), rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| 1.0 / v).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data), Op::Recip(x), rg)
    }

    /// Flat element `index` of `x` as a `1 x 1` node.
    pub fn element(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x).data()[index];
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Element(x, index), rg)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data), Op::Softmax(x), rg)
    }

    /// Row-wise softmax where columns with `keep[j] == false` receive exactly
    /// zero weight. At least one column must be kept.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(keep.len(), c, "mask width");
        assert!(keep.iter().any(|k| *k), "mask removes every column");
        if keep.iter().all(|k| *k) {
            return self.softmax_rows(x);
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, k) in row.iter_mut().zip(keep) {
                *v = if *k { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        // masked entries are exact zeros, so the plain softmax VJP applies
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data), Op::Softmax(x), rg)
    }

    /// Row-wise layer normalization with gain and bias (`1 x cols` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, c));
        assert_eq!(self.dims(beta), (1, c));
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data), Op::Gelu(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= r, "slice_rows {start}+{len} of {r}");
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::matrix(len, c, data), Op::SliceRows(x, start), rg)
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.slice_rows(x, i, 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(x);
        assert!(start + len <= c, "slice_cols {start}+{len} of {c}");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, len, data), Op::SliceCols(x, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.dims(*p);
            assert_eq!(pc, c, "concat_rows width");
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pr, pc) = self.dims(*p);
                assert_eq!(pr, r, "concat_cols height");
                pc
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::matrix(r, c, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(x);
        self.push(Tensor::row_vector(out), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (vocab, c) = self.dims(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < vocab, "token id {id} outside table of {vocab}");
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::matrix(ids.len(), c, data),
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            rg,
        )
    }

    /// Divides each row by its L2 norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "l2_normalize_rows on zero row");
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, data), Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`, as `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.dims(logits);
        assert_eq!(targets.len(), r, "one target per row");
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[i];
            assert!(t < c, "target {t} outside {c} classes");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy over unmasked entries (`mask[i] == true`).
    /// With no unmasked entries the result is `0`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Var {
        let n = self.value(logits).len();
        assert_eq!(targets.len(), n);
        assert_eq!(mask.len(), n);
        let count = mask.iter().filter(|m| **m).count();
        let mut total = 0.0;
        for ((z, y), m) in self.value(logits).data().iter().zip(targets).zip(mask) {
            if *m {
                total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort();
        Gradients {
            node_grads: grads,
            params,
            param_count: self.param_count,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().expect("allocated"));
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    // dA = dC B^T
                    let d = matmul_bt_raw(g, bv, m, n, k);
                    add_into(ga, &d);
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = A^T dC
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            row.iter_mut().zip(grow).for_each(|(o, x)| *o += a_ip * x);
                        }
                    }
                });
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    // dA = dC B
                    let d = matmul_raw(g, bv, m, n, k);
                    add_into(ga, &d);
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = dC^T A
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let row = &mut gb[j * k..(j + 1) * k];
                            let arow = &av[i * k..(i + 1) * k];
                            row.iter_mut().zip(arow).for_each(|(o, x)| *o += gij * x);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = out.cols();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v));
            }
            Op::MulScalar(x, s) => {
                let sv = self.scalar(*s);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v));
                self.accumulate(grads, *s, |gs| {
                    gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Recip(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] -= g[i] / (xv[i] * xv[i]);
                    }
                });
            }
            Op::Element(x, index) => {
                self.accumulate(grads, *x, |gx| gx[*index] += g[0]);
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dh = vec![0.0; c];
                    for (i, (gxr, (gr, hr))) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c).zip(xhat.chunks(c)))
                        .enumerate()
                    {
                        for j in 0..c {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gxr[j] += rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let v = xv[i];
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                self.accumulate(grads, *x, |gx| {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                });
            }
            Op::SliceCols(x, start) => {
                let w = out.cols();
                let c = self.dims(*x).1;
                self.accumulate(grads, *x, |gx| {
                    for (i, gr) in g.chunks(w).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + w], gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    self.accumulate(grads, *p, |gp| {
                        for (i, gr) in gp.chunks_mut(w).enumerate() {
                            add_into(gr, &g[i * c + col..i * c + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let inv = 1.0 / r as f64;
                self.accumulate(grads, *x, |gx| {
                    for row in gx.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(o, v)| *o += v * inv);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Embedding { table, ids } => {
                let c = out.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = out.cols();
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for (i, gxr) in gx.chunks_mut(c).enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let scale = g[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let z = self.value(*logits).data();
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for i in 0..gl.len() {
                        if mask[i] {
                            gl[i] += scale * (sigmoid(z[i]) - targets[i]);
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, x)| *o += a_ip * x);
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub(crate) fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}
