//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates vector-Jacobian products into every ancestor. Parameters are
//! pulled from a [`ParamStore`] with [`Graph::param`]; their gradients come
//! back keyed by [`ParamId`].
//!
//! All values are treated as matrices (see [`Tensor`]). Row vectors are
//! `1 × n`, and broadcasting exists only where named (`add_row`, `mul_col`).

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var, f64),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    TileRows(Var, usize),
    BlockSoftmax(Var, usize, Vec<bool>),
    BlockSumRows(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::TileRows(..) => "tile_rows",
            Op::BlockSoftmax(..) => "block_softmax",
            Op::BlockSumRows(..) => "block_sum_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward/backward context. Not shared across threads.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    dropout_rng: Option<ChaCha8Rng>,
    check_finite: bool,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            param_order: Vec::new(),
            dropout_rng: None,
            check_finite: cfg!(debug_assertions),
            first_non_finite: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        let mut g = Self::new();
        g.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Enables or disables per-op finiteness tracking (on by default in debug builds).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Name and tape position of the first op that produced a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.check_finite && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_len(&self, a: Var, b: Var, op: &str) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            self.dims(a),
            self.dims(b),
            "{op}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        self.push(Tensor::raw(vec![r, c], data), op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        self.same_len(a, b, op.name());
        let (r, c) = self.dims(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::raw(vec![r, c], data), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul: {m}x{k} by {k2}x{n}");
        let data = matmul_kernel(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        self.push(Tensor::raw(vec![m, n], data), Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt: {m}x{k} by ({n}x{k2})ᵀ");
        let data = matmul_nt_kernel(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        self.push(Tensor::raw(vec![m, n], data), Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 × n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(r), (1, n), "add_row: row must be 1x{n}");
        let row = self.nodes[r.0].value.data();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(row) {
                *x += y;
            }
        }
        self.push(Tensor::raw(vec![m, n], data), Op::AddRow(a, r))
    }

    /// Scales row `i` of `a` by `c[i]`, where `c` is `m × 1`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(self.dims(c), (m, 1), "mul_col: column must be {m}x1");
        let col = self.nodes[c.0].value.data();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for (chunk, s) in data.chunks_mut(n).zip(col) {
            for x in chunk {
                *x *= s;
            }
        }
        self.push(Tensor::raw(vec![m, n], data), Op::MulCol(a, c))
    }

    /// Elementwise product with a non-differentiable tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let (m, n) = self.dims(a);
        assert_eq!(c.len(), m * n, "mul_const: size mismatch");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(Tensor::raw(vec![m, n], data), Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::Ln(a, floor))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::raw(vec![1, 1], vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = vec![0.0; n];
        for chunk in self.nodes[a.0].value.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        self.push(Tensor::raw(vec![1, n], out), Op::SumRows(a))
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .data()
            .chunks(n)
            .map(|c| c.iter().sum())
            .collect();
        self.push(Tensor::raw(vec![m, 1], out), Op::SumCols(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut data = self.nodes[a.0].value.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::raw(vec![m, n], data), Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, m, "concat_cols: row mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::raw(vec![m, n], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            assert_eq!(c, n, "concat_rows: column mismatch");
            m += r;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        self.push(Tensor::raw(vec![m, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(start + len <= n, "slice_cols out of range");
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::raw(vec![m, len], data), Op::SliceCols(a, start))
    }

    /// Stacks `table[ids[k]]` row by row.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (m, n) = self.dims(table);
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            assert!(i < m, "gather_rows: index {i} out of {m}");
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::raw(vec![ids.len(), n], data),
            Op::GatherRows(table, ids.to_vec()),
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let (m, n) = self.dims(a);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(times * m * n);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        self.push(Tensor::raw(vec![times * m, n], data), Op::TileRows(a, times))
    }

    /// Softmax across blocks. `a` is `(blocks·b) × k` with row `j·b + r`
    /// holding position `j` of sequence `r`. Each `(r, col)` pair is
    /// normalized over `j`, skipping rows whose `mask` entry is false
    /// (those outputs are zero). Every sequence needs at least one live row.
    pub fn block_softmax(&mut self, a: Var, blocks: usize, mask: &[bool]) -> Var {
        let (rows, k) = self.dims(a);
        assert_eq!(rows % blocks, 0, "block_softmax: rows not divisible");
        assert_eq!(mask.len(), rows, "block_softmax: mask length");
        let b = rows / blocks;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; rows * k];
        for r in 0..b {
            assert!(
                (0..blocks).any(|j| mask[j * b + r]),
                "block_softmax: sequence {r} fully masked"
            );
            for c in 0..k {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..blocks {
                    let row = j * b + r;
                    if mask[row] {
                        mx = mx.max(src[row * k + c]);
                    }
                }
                let mut z = 0.0;
                for j in 0..blocks {
                    let row = j * b + r;
                    if mask[row] {
                        let e = (src[row * k + c] - mx).exp();
                        out[row * k + c] = e;
                        z += e;
                    }
                }
                for j in 0..blocks {
                    out[(j * b + r) * k + c] /= z;
                }
            }
        }
        self.push(
            Tensor::raw(vec![rows, k], out),
            Op::BlockSoftmax(a, blocks, mask.to_vec()),
        )
    }

    /// Sums the `blocks` stacked slabs of `a`: `(blocks·b) × n → b × n`.
    pub fn block_sum_rows(&mut self, a: Var, blocks: usize) -> Var {
        let (rows, n) = self.dims(a);
        assert_eq!(rows % blocks, 0, "block_sum_rows: rows not divisible");
        let b = rows / blocks;
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; b * n];
        for j in 0..blocks {
            for (o, x) in out.iter_mut().zip(&src[j * b * n..(j + 1) * b * n]) {
                *o += x;
            }
        }
        self.push(Tensor::raw(vec![b, n], out), Op::BlockSumRows(a, blocks))
    }

    /// Inverted dropout; the identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let (m, n) = {
            let t = &self.nodes[a.0].value;
            (t.rows(), t.cols())
        };
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, Tensor::raw(vec![m, n], mask))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::raw(vec![1, 1], vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_order.clone(),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let (m, n) = (y.rows(), y.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = val(*a).cols();
                let ga = matmul_nt_kernel(g.data(), val(*b).data(), m, n, k);
                let gb = matmul_tn_kernel(val(*a).data(), g.data(), m, k, n);
                acc(grads, *a, ga, val(*a));
                acc(grads, *b, gb, val(*b));
            }
            Op::MatMulNT(a, b) => {
                let k = val(*a).cols();
                let ga = matmul_kernel(g.data(), val(*b).data(), m, n, k);
                let gb = matmul_tn_kernel(g.data(), val(*a).data(), m, n, k);
                acc(grads, *a, ga, val(*a));
                acc(grads, *b, gb, val(*b));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.data().to_vec(), val(*a));
                acc(grads, *b, g.data().to_vec(), val(*b));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.data().to_vec(), val(*a));
                acc(grads, *b, g.data().iter().map(|x| -x).collect(), val(*b));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let ga = g.data().iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(va).map(|(g, x)| g * x).collect();
                acc(grads, *a, ga, val(*a));
                acc(grads, *b, gb, val(*b));
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.data().to_vec(), val(*a));
                let mut gr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (o, x) in gr.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                acc(grads, *r, gr, val(*r));
            }
            Op::MulCol(a, c) => {
                let (va, vc) = (val(*a).data(), val(*c).data());
                let mut ga = g.data().to_vec();
                let mut gc = vec![0.0; m];
                for row in 0..m {
                    let s = vc[row];
                    let mut dot = 0.0;
                    for col in 0..n {
                        let idx = row * n + col;
                        dot += g.data()[idx] * va[idx];
                        ga[idx] *= s;
                    }
                    gc[row] = dot;
                }
                acc(grads, *a, ga, val(*a));
                acc(grads, *c, gc, val(*c));
            }
            Op::MulConst(a, c) => {
                let ga = g.data().iter().zip(c.data()).map(|(g, c)| g * c).collect();
                acc(grads, *a, ga, val(*a));
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.data().iter().map(|x| x * s).collect(), val(*a));
            }
            Op::AddScalar(a) => acc(grads, *a, g.data().to_vec(), val(*a)),
            Op::Sigmoid(a) => {
                let ga = zip_map(g, y, |g, y| g * y * (1.0 - y));
                acc(grads, *a, ga, val(*a));
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, y, |g, y| g * (1.0 - y * y));
                acc(grads, *a, ga, val(*a));
            }
            Op::Relu(a) => {
                let ga = zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                acc(grads, *a, ga, val(*a));
            }
            Op::Exp(a) => {
                let ga = zip_map(g, y, |g, y| g * y);
                acc(grads, *a, ga, val(*a));
            }
            Op::Ln(a, floor) => {
                let ga = zip_map(g, val(*a), |g, x| if x > *floor { g / x } else { 0.0 });
                acc(grads, *a, ga, val(*a));
            }
            Op::Sqrt(a) => {
                let ga = zip_map(g, y, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 });
                acc(grads, *a, ga, val(*a));
            }
            Op::Square(a) => {
                let ga = zip_map(g, val(*a), |g, x| 2.0 * g * x);
                acc(grads, *a, ga, val(*a));
            }
            Op::Clamp(a, lo, hi) => {
                let ga = zip_map(g, val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                acc(grads, *a, ga, val(*a));
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(grads, *a, vec![s; val(*a).len()], val(*a));
            }
            Op::SumRows(a) => {
                let rows = val(*a).rows();
                let mut ga = Vec::with_capacity(rows * n);
                for _ in 0..rows {
                    ga.extend_from_slice(g.data());
                }
                acc(grads, *a, ga, val(*a));
            }
            Op::SumCols(a) => {
                let cols = val(*a).cols();
                let ga = g
                    .data()
                    .iter()
                    .flat_map(|&s| std::iter::repeat_n(s, cols))
                    .collect();
                acc(grads, *a, ga, val(*a));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = vec![0.0; m * n];
                for row in 0..m {
                    let ys = &y.data()[row * n..(row + 1) * n];
                    let gs = &g.data()[row * n..(row + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for col in 0..n {
                        ga[row * n + col] = ys[col] * (gs[col] - dot);
                    }
                }
                acc(grads, *a, ga, val(*a));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(m * w);
                    for row in 0..m {
                        gp.extend_from_slice(&g.data()[row * n + offset..row * n + offset + w]);
                    }
                    acc(grads, p, gp, val(p));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(grads, p, g.data()[offset..offset + len].to_vec(), val(p));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let full = val(*a).cols();
                let mut ga = vec![0.0; m * full];
                for row in 0..m {
                    ga[row * full + start..row * full + start + n]
                        .copy_from_slice(&g.data()[row * n..(row + 1) * n]);
                }
                acc(grads, *a, ga, val(*a));
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let mut gt = vec![0.0; t.len()];
                for (k, &id) in ids.iter().enumerate() {
                    for col in 0..n {
                        gt[id * n + col] += g.data()[k * n + col];
                    }
                }
                acc(grads, *table, gt, t);
            }
            Op::TileRows(a, times) => {
                let len = val(*a).len();
                let mut ga = vec![0.0; len];
                for t in 0..*times {
                    for (o, x) in ga.iter_mut().zip(&g.data()[t * len..(t + 1) * len]) {
                        *o += x;
                    }
                }
                acc(grads, *a, ga, val(*a));
            }
            Op::BlockSoftmax(a, blocks, mask) => {
                let b = m / blocks;
                let mut ga = vec![0.0; m * n];
                for r in 0..b {
                    for c in 0..n {
                        let mut dot = 0.0;
                        for j in 0..*blocks {
                            let idx = (j * b + r) * n + c;
                            dot += y.data()[idx] * g.data()[idx];
                        }
                        for j in 0..*blocks {
                            let row = j * b + r;
                            if mask[row] {
                                let idx = row * n + c;
                                ga[idx] = y.data()[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                }
                acc(grads, *a, ga, val(*a));
            }
            Op::BlockSumRows(a, blocks) => {
                let mut ga = Vec::with_capacity(blocks * m * n);
                for _ in 0..*blocks {
                    ga.extend_from_slice(g.data());
                }
                acc(grads, *a, ga, val(*a));
            }
        }
    }
}

fn zip_map(g: &Tensor, y: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.data().iter().zip(y.data()).map(|(&g, &y)| f(g, y)).collect()
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>, like: &Tensor) {
    let t = Tensor::raw(like.shape().to_vec(), g);
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter in `store`, zero-filled where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}
