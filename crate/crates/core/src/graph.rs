//! Tape-based reverse-mode differentiation over rank-2 values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameters are borrowed from their [`ParamStore`] rather than copied, so a
//! store may be shared by any number of graphs while no optimizer holds it.
//! After [`Graph::backward`], [`Graph::accumulate`] adds the gradients that
//! belong to one store into a [`Gradients`] buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-12;

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Input,
    Param {
        store: usize,
        id: ParamId,
    },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    AddN(Vec<Var>),
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// One forward/backward pass. Single-threaded; build one per example.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
    rng: Option<ChaCha8Rng>,
}

fn store_key(store: &ParamStore) -> usize {
    store as *const ParamStore as usize
}

impl<'p> Graph<'p> {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: false,
            rng: None,
        }
    }

    /// Training graph: dropout draws its masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
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

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shapes are positive")
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        Error::Shape {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let rows = t.rows();
        let cols = t.cols();
        self.push(rows, cols, t.data().to_vec(), Op::Input, false)
    }

    pub fn input_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::TensorData {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(rows, cols, data, Op::Input, false))
    }

    /// Borrowed parameter leaf. Gradients flow into it only if it is trainable.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.param_with(store, id, p.trainable)
    }

    /// Parameter leaf that always tracks gradients, regardless of its flag.
    pub fn param_tracked(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.param_with(store, id, true)
    }

    fn param_with(&mut self, store: &'p ParamStore, id: ParamId, needs_grad: bool) -> Var {
        let p = store.get(id);
        let rows = p.value.rows();
        let cols = p.value.cols();
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Borrowed(p.value.data()),
            op: Op::Param {
                store: store_key(store),
                id,
            },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    /// Broadcasts a 1×n row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(self.shape_err("add_row", a, row));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, factor), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Inverted dropout. Identity when `rate == 0` or the graph is not training.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let rng = self.rng.as_mut().expect("training graphs carry an rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Dropout(a, mask), ng)
    }

    /// Row-wise layer normalization with 1×n scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if self.shape(beta) != (1, c) {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Softmax along each row. Columns with `key_mask[j] == false` get
    /// probability exactly zero.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = key_mask {
            if m.len() != c {
                return Err(Error::MaskLength {
                    expected: c,
                    got: m.len(),
                });
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::FullyMasked);
            }
        }
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            softmax_into(row, key_mask, &mut out);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Softmax(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(self.shape_err("concat_cols", parts[0], bad));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != cols) {
            return Err(self.shape_err("concat_rows", parts[0], bad));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, end],
            });
        }
        let w = end - start;
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(r, w, out, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, end],
            });
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if indices.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                left: vec![r, c],
                right: vec![0],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: r });
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(indices.len(), c, out, Op::GatherRows(table, indices.to_vec()), ng))
    }

    /// `-log softmax(logits)[label]` for a 1×n logit row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: vec![r, c],
                right: vec![1, c],
            });
        }
        self.softmax_cross_entropy_rows(logits, &[label])
    }

    /// Mean over rows of `-log softmax(row)[label]`, one label per row.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: vec![r, c],
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = 0.0;
        for (row, &label) in self.value(logits).chunks(c).zip(labels) {
            softmax_into(row, None, &mut probs);
            total += log_sum_exp(row) - row[label];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            1,
            1,
            vec![total / r as f64],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    /// Elementwise sum of same-shape nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(parts[0]);
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p) != shape) {
            return Err(self.shape_err("add_n", parts[0], bad));
        }
        let mut out = vec![0.0; shape.0 * shape.1];
        for &p in parts {
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape.0, shape.1, out, Op::AddN(parts.to_vec()), ng))
    }

    /// Reverse sweep from a 1×1 `loss`. Can be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Shape {
                op: "backward",
                left: vec![r, c],
                right: vec![1, 1],
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter leaf drawn from `store` into `out`.
    /// Parameters without a buffer in `out` are skipped.
    pub fn accumulate(&self, store: &ParamStore, out: &mut Gradients) {
        let key = store_key(store);
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param { store: s, id }, Some(g)) = (&node.op, g) {
                if *s == key {
                    if let Some(buf) = out.get_mut(*id) {
                        for (b, v) in buf.iter_mut().zip(g) {
                            *b += v;
                        }
                    }
                }
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let out = node.value.as_slice();
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.ng(*a) {
                    let ga = self.slot(grads, *a);
                    tensor::matmul_bt_acc(g, self.value(*b), ga, m, n, k);
                }
                if self.ng(*b) {
                    let gb = self.slot(grads, *b);
                    tensor::matmul_at_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.ng(*a) {
                    let ga = self.slot(grads, *a);
                    tensor::matmul_acc(g, self.value(*b), ga, m, n, k);
                }
                if self.ng(*b) {
                    let gb = self.slot(grads, *b);
                    tensor::matmul_at_acc(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.ng(*row) {
                    let gr = self.slot(grads, *row);
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    let ga = self.slot(grads, *a);
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    let gb = self.slot(grads, *b);
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, f) => {
                let ga = self.slot(grads, *a);
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * f;
                }
            }
            Op::Tanh(a) => {
                let ga = self.slot(grads, *a);
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = self.slot(grads, *a);
                for ((x, gi), y) in ga.iter_mut().zip(g).zip(out) {
                    *x += gi * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = self.slot(grads, *a);
                for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av) {
                    if *xi > 0.0 {
                        *x += gi;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = self.slot(grads, *a);
                for ((x, gi), xi) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi * gelu_grad(*xi);
                }
            }
            Op::Dropout(a, mask) => {
                let ga = self.slot(grads, *a);
                for ((x, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *x += gi * m;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                if self.ng(*gamma) {
                    let gg = self.slot(grads, *gamma);
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, gi), h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += gi * h;
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = self.slot(grads, *beta);
                    for grow in g.chunks(cols) {
                        add_into(gb, grow);
                    }
                }
                if self.ng(*x) {
                    let gx = self.slot(grads, *x);
                    let n = cols as f64;
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..cols {
                            let d = grow[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hrow[j];
                        }
                        let scale = inv_std[r] / n;
                        for j in 0..cols {
                            let d = grow[j] * gv[j];
                            gx[r * cols + j] += scale * (n * d - sum_d - hrow[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let ga = self.slot(grads, *a);
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let yrow = &out[r * cols..(r + 1) * cols];
                    let s: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.ng(p) {
                        let gp = self.slot(grads, p);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * pc..(r + 1) * pc],
                                &g[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        add_into(self.slot(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a).1;
                let ga = self.slot(grads, *a);
                for r in 0..rows {
                    add_into(
                        &mut ga[r * ac + start..r * ac + start + cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::SliceRows(a, start) => {
                let ga = self.slot(grads, *a);
                add_into(&mut ga[start * cols..(start + rows) * cols], g);
            }
            Op::Transpose(a) => {
                // node is rows×cols = (a.cols)×(a.rows)
                let ga = self.slot(grads, *a);
                for i in 0..rows {
                    for j in 0..cols {
                        ga[j * rows + i] += g[i * cols + j];
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let gt = self.slot(grads, *table);
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let c = self.shape(*logits).1;
                let gl = self.slot(grads, *logits);
                let s = g[0] / labels.len() as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Sum(a) => {
                let ga = self.slot(grads, *a);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if self.ng(p) {
                        add_into(self.slot(grads, p), g);
                    }
                }
            }
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.as_slice().len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

/// Numerically stable softmax of `row`, appended to `out`.
pub fn softmax_into(row: &[f64], mask: Option<&[bool]>, out: &mut Vec<f64>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for (j, &v) in row.iter().enumerate() {
        let e = if keep(j) { libm::exp(v - max) } else { 0.0 };
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= total;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, None, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[0.0, core::f64::consts::LN_2]);
        assert_abs_diff_eq!(p[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.4).collect();
        for (a, b) in softmax(&x).iter().zip(softmax(&shifted)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut g = Graph::new();
        let x = g.input_from(1, 3, vec![1.0, 5.0, 2.0]).unwrap();
        let y = g.softmax_rows(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], 0.0);
        assert_abs_diff_eq!(v[0] + v[2], 1.0, epsilon = 1e-15);
        assert_eq!(
            g.softmax_rows(x, Some(&[true])),
            Err(Error::MaskLength { expected: 3, got: 1 })
        );
        assert_eq!(g.softmax_rows(x, Some(&[false, false, false])), Err(Error::FullyMasked));
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let mut g = Graph::new();
        let x = g.input_from(1, 4, vec![0.7; 4]).unwrap();
        let l = g.softmax_cross_entropy(x, 2).unwrap();
        assert_abs_diff_eq!(g.scalar(l), libm::log(4.0), epsilon = 1e-12);

        let y = g.input_from(1, 3, vec![0.0, 1e4, 0.0]).unwrap();
        let l = g.softmax_cross_entropy(y, 1).unwrap();
        assert!(g.scalar(l) < 1e-12);
        assert_eq!(
            g.softmax_cross_entropy(y, 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let mut store = ParamStore::new();
        let id = store
            .add("z", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let z = g.param(&store, id);
        let l = g.softmax_cross_entropy(z, 0).unwrap();
        g.backward(l).unwrap();
        let p = softmax(&[0.5, -1.0, 2.0]);
        let grad = g.grad(z).unwrap();
        assert_abs_diff_eq!(grad[0], p[0] - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[1], p[1], epsilon = 1e-15);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input_from(2, 3, vec![0.0; 6]).unwrap();
        let b = g.input_from(2, 3, vec![0.0; 6]).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let a = g.input_from(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(g.dropout(a, 0.5), a);
        let mut t = Graph::training(rand::SeedableRng::seed_from_u64(1));
        let a = t.input_from(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.dropout(a, 0.0), a);
        let d = t.dropout(a, 0.5);
        for (x, y) in t.value(a).to_vec().iter().zip(t.value(d)) {
            assert!(*y == 0.0 || (*y - 2.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        store.set_trainable(w, false);
        let mut g = Graph::new();
        let x = g.param(&store, w);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }
}
