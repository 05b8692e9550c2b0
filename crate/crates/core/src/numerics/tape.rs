use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gelu, gelu_grad, gemm, rope_in_place, row_stats, silu, silu_grad, softmax_row_in_place, Array, MatRef};
use crate::error::{usage, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    Scale(usize, f32),
    AddScalar(usize),
    Gelu(usize),
    Silu(usize),
    LayerNorm { a: usize, rstd: Vec<f32> },
    Softmax { a: usize, lambda: f32 },
    Rope { a: usize, positions: Rc<Vec<(usize, usize)>>, head_dim: usize, base: f32 },
    Gather { a: usize, index: Rc<Vec<u32>> },
    Reshape(usize),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    SumSquares(usize),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of array operations, differentiated in reverse.
///
/// Shape errors inside recorded ops are programmer errors and panic; callers
/// validate user-facing shapes before building a graph.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        v.index
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[self.idx(v)].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(self.idx(v))
    }

    fn val(&self, i: usize) -> &Array {
        &self.nodes[i].value
    }

    /// `op(a) * op(b)` for 2-D operands, with optional transposition.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (av, bv) = (self.val(ia), self.val(ib));
        let ma = MatRef { data: av.data(), rows: av.rows(), cols: av.cols(), trans: ta };
        let mb = MatRef { data: bv.data(), rows: bv.rows(), cols: bv.cols(), trans: tb };
        let m = if ta { ma.cols } else { ma.rows };
        let n = if tb { mb.rows } else { mb.cols };
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, &mut out, 0.0);
        let ng = self.ng(ia) || self.ng(ib);
        self.push(Array::matrix(m, n, out), Op::MatMul { a: ia, b: ib, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: fn(usize, usize) -> Op) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = self.val(ia).zip_map(self.val(ib), f).expect("elementwise shapes");
        let ng = self.ng(ia) || self.ng(ib);
        self.push(out, op(ia, ib), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a `[1 x n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.idx(a), self.idx(row));
        let mut out = self.val(ia).clone();
        let r = self.val(ir).data();
        assert_eq!(r.len(), out.cols(), "add_row width");
        for chunk in out.data_mut().chunks_mut(r.len()) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        let ng = self.ng(ia) || self.ng(ir);
        self.push(out, Op::AddRow { a: ia, row: ir }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let ia = self.idx(a);
        let out = self.val(ia).map(|v| v * s);
        let ng = self.ng(ia);
        self.push(out, Op::Scale(ia, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let ia = self.idx(a);
        let out = self.val(ia).map(|v| v + s);
        let ng = self.ng(ia);
        self.push(out, Op::AddScalar(ia), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = self.val(ia).map(gelu);
        let ng = self.ng(ia);
        self.push(out, Op::Gelu(ia), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = self.val(ia).map(silu);
        let ng = self.ng(ia);
        self.push(out, Op::Silu(ia), ng)
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let mut out = self.val(ia).clone();
        let cols = out.cols();
        let mut rstds = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let (mean, rstd) = row_stats(row);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(ia);
        self.push(out, Op::LayerNorm { a: ia, rstd: rstds }, ng)
    }

    /// Row-wise `softmax(lambda * a)`.
    pub fn softmax_scaled(&mut self, a: Var, lambda: f32) -> Var {
        let ia = self.idx(a);
        let mut out = self.val(ia).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_row_in_place(row, lambda);
        }
        let ng = self.ng(ia);
        self.push(out, Op::Softmax { a: ia, lambda }, ng)
    }

    /// Per-head 2-D rotary embedding over rows of `a`.
    pub fn rope(&mut self, a: Var, positions: Rc<Vec<(usize, usize)>>, head_dim: usize, base: f32) -> Var {
        let ia = self.idx(a);
        let mut out = self.val(ia).clone();
        let cols = out.cols();
        rope_in_place(out.data_mut(), cols, head_dim, &positions, base, false).expect("rope geometry");
        let ng = self.ng(ia);
        self.push(out, Op::Rope { a: ia, positions, head_dim, base }, ng)
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<u32>>, shape: &[usize]) -> Var {
        let ia = self.idx(a);
        let src = self.val(ia).data();
        let data: Vec<f32> = index.iter().map(|&i| src[i as usize]).collect();
        let out = Array::new(shape.to_vec(), data).expect("gather shape");
        let ng = self.ng(ia);
        self.push(out, Op::Gather { a: ia, index }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ia = self.idx(a);
        let out = self.val(ia).clone().reshape(shape).expect("reshape size");
        let ng = self.ng(ia);
        self.push(out, Op::Reshape(ia), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia);
        let cols = v.cols();
        let out = Array::matrix(len, cols, v.data()[start * cols..(start + len) * cols].to_vec());
        let ng = self.ng(ia);
        self.push(out, Op::SliceRows { a: ia, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia);
        let cols = v.cols();
        assert!(start + len <= cols, "slice_cols range");
        let mut data = Vec::with_capacity(v.rows() * len);
        for row in v.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Array::matrix(v.rows(), len, data);
        let ng = self.ng(ia);
        self.push(out, Op::SliceCols { a: ia, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let cols = self.val(ids[0]).cols();
        let mut data = Vec::new();
        for &i in &ids {
            assert_eq!(self.val(i).cols(), cols, "concat_rows widths");
            data.extend_from_slice(self.val(i).data());
        }
        let rows = data.len() / cols;
        let ng = ids.iter().any(|&i| self.ng(i));
        self.push(Array::matrix(rows, cols, data), Op::ConcatRows(ids), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let rows = self.val(ids[0]).rows();
        let cols: usize = ids.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &ids {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let ng = ids.iter().any(|&i| self.ng(i));
        self.push(Array::matrix(rows, cols, data), Op::ConcatCols(ids), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.val(ia).sum() as f32;
        let ng = self.ng(ia);
        self.push(Array::scalar(s), Op::Sum(ia), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.val(ia).sum_squares() as f32;
        let ng = self.ng(ia);
        self.push(Array::scalar(s), Op::SumSquares(ia), ng)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Array>> {
        for &w in wrt {
            if w.tape != self.id || w.index >= self.nodes.len() {
                return Err(usage!("gradient requested for a variable not recorded on this tape"));
            }
            if !self.nodes[w.index].needs_grad {
                return Err(usage!("gradient requested for a non-differentiable input"));
            }
        }
        let grads = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|&w| {
                grads.get(w).cloned().unwrap_or_else(|| Array::zeros(self.nodes[w.index].value.shape()))
            })
            .collect())
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(usage!("backward from a variable not recorded on this tape"));
        }
        let out = output.index;
        if self.nodes[out].value.len() != 1 {
            return Err(usage!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            ));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[out].needs_grad {
            grads[out] = Some(Array::full(self.nodes[out].value.shape(), 1.0));
        }
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, n) = (g.rows(), g.cols());
                let gm = |trans| MatRef { data: g.data(), rows: m, cols: n, trans };
                if self.ng(*a) {
                    let buf = slot(grads, *a, av.shape());
                    let bm = |trans| MatRef { data: bv.data(), rows: bv.rows(), cols: bv.cols(), trans };
                    if !ta {
                        gemm(gm(false), bm(!tb), buf.data_mut(), 1.0);
                    } else {
                        gemm(bm(*tb), gm(true), buf.data_mut(), 1.0);
                    }
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, bv.shape());
                    let am = |trans| MatRef { data: av.data(), rows: av.rows(), cols: av.cols(), trans };
                    if !tb {
                        gemm(am(!ta), gm(false), buf.data_mut(), 1.0);
                    } else {
                        gemm(gm(true), am(*ta), buf.data_mut(), 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |gv, _| gv);
                self.acc_map(grads, *b, g, |gv, _| gv);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |gv, _| gv);
                self.acc_map(grads, *b, g, |gv, _| -gv);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.val(*b).data();
                    let buf = slot(grads, *a, g.shape());
                    for ((d, gv), bx) in buf.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *d += gv * bx;
                    }
                }
                if self.ng(*b) {
                    let av = self.val(*a).data();
                    let buf = slot(grads, *b, g.shape());
                    for ((d, gv), ax) in buf.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *d += gv * ax;
                    }
                }
            }
            Op::AddRow { a, row } => {
                self.acc_map(grads, *a, g, |gv, _| gv);
                if self.ng(*row) {
                    let shape = self.val(*row).shape().to_vec();
                    let buf = slot(grads, *row, &shape);
                    let cols = g.cols();
                    for chunk in g.data().chunks(cols) {
                        for (d, gv) in buf.data_mut().iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_map(grads, *a, g, move |gv, _| gv * s);
            }
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |gv, _| gv),
            Op::Gelu(a) => self.acc_map(grads, *a, g, |gv, x| gv * gelu_grad(x)),
            Op::Silu(a) => self.acc_map(grads, *a, g, |gv, x| gv * silu_grad(x)),
            Op::LayerNorm { a, rstd } => {
                if self.ng(*a) {
                    let y = &node.value;
                    let cols = y.cols();
                    let buf = slot(grads, *a, y.shape());
                    let n = cols as f32;
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let gr = &g.data()[span.clone()];
                        let yr = &y.data()[span.clone()];
                        let mg = gr.iter().sum::<f32>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / n;
                        for ((d, gv), yv) in buf.data_mut()[span].iter_mut().zip(gr).zip(yr) {
                            *d += rs * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::Softmax { a, lambda } => {
                if self.ng(*a) {
                    let y = &node.value;
                    let cols = y.cols();
                    let buf = slot(grads, *a, y.shape());
                    for ((dx, gr), yr) in buf.data_mut().chunks_mut(cols).zip(g.data().chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dx.iter_mut().zip(gr).zip(yr) {
                            *d += lambda * yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Rope { a, positions, head_dim, base } => {
                if self.ng(*a) {
                    let mut back = g.clone();
                    let cols = back.cols();
                    rope_in_place(back.data_mut(), cols, *head_dim, positions, *base, true).expect("rope geometry");
                    slot(grads, *a, g.shape()).add_assign(&back);
                }
            }
            Op::Gather { a, index } => {
                if self.ng(*a) {
                    let shape = self.val(*a).shape().to_vec();
                    let buf = slot(grads, *a, &shape);
                    let d = buf.data_mut();
                    for (&src, gv) in index.iter().zip(g.data()) {
                        d[src as usize] += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.ng(*a) {
                    let shape = self.val(*a).shape().to_vec();
                    let buf = slot(grads, *a, &shape);
                    for (d, gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if self.ng(*a) {
                    let shape = self.val(*a).shape().to_vec();
                    let cols = g.cols();
                    let buf = slot(grads, *a, &shape);
                    let dst = &mut buf.data_mut()[start * cols..start * cols + g.len()];
                    for (d, gv) in dst.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let shape = self.val(*a).shape().to_vec();
                    let w = g.cols();
                    let buf = slot(grads, *a, &shape);
                    let cols = buf.cols();
                    for (dst, gr) in buf.data_mut().chunks_mut(cols).zip(g.data().chunks(w)) {
                        for (d, gv) in dst[*start..start + w].iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &p in ids {
                    let len = self.val(p).len();
                    if self.ng(p) {
                        let shape = self.val(p).shape().to_vec();
                        let buf = slot(grads, p, &shape);
                        for (d, gv) in buf.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *d += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(ids) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in ids {
                    let w = self.val(p).cols();
                    if self.ng(p) {
                        let shape = self.val(p).shape().to_vec();
                        let buf = slot(grads, p, &shape);
                        for (dst, gr) in buf.data_mut().chunks_mut(w).zip(g.data().chunks(total)) {
                            for (d, gv) in dst.iter_mut().zip(&gr[offset..offset + w]) {
                                *d += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc_map_input(grads, *a, move |_| s);
            }
            Op::SumSquares(a) => {
                let s = g.item();
                self.acc_map_input(grads, *a, move |x| 2.0 * x * s);
            }
        }
    }

    /// `grad[a] += f(g, a)` elementwise, when `a` shares `g`'s length.
    fn acc_map(&self, grads: &mut [Option<Array>], a: usize, g: &Array, f: impl Fn(f32, f32) -> f32) {
        if !self.ng(a) {
            return;
        }
        let av = self.val(a);
        let buf = slot(grads, a, av.shape());
        for ((d, gv), x) in buf.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
            *d += f(*gv, *x);
        }
    }

    fn acc_map_input(&self, grads: &mut [Option<Array>], a: usize, f: impl Fn(f32) -> f32) {
        if !self.ng(a) {
            return;
        }
        let av = self.val(a);
        let buf = slot(grads, a, av.shape());
        for (d, x) in buf.data_mut().iter_mut().zip(av.data()) {
            *d += f(*x);
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Array>], i: usize, shape: &[usize]) -> &'g mut Array {
    grads[i].get_or_insert_with(|| Array::zeros(shape))
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// `None` when `v` did not influence the output or is not differentiable.
    pub fn get(&self, v: Var) -> Option<&Array> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.var(Array::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let y = t.sum_squares(x);
        let g = t.grad(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.var(Array::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let c = t.constant(Array::scalar(4.0));
        let y = t.sum(c);
        let g = t.grad(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn foreign_variable_is_usage_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.var(Array::scalar(1.0));
        let y = b.var(Array::scalar(2.0));
        let s = b.sum(y);
        assert!(matches!(b.grad(s, &[x]), Err(crate::Error::Usage(_))));
        let k = b.constant(Array::scalar(1.0));
        assert!(matches!(b.grad(s, &[k]), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn frozen_weights_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.var(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let w = t.constant(Array::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.0]));
        let y = t.matmul(x, w);
        let s = t.sum(y);
        let grads = t.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        // d/dx sum(x w) = 1 * w^T row sums
        assert_eq!(grads.get(x).unwrap().data(), &[-0.5, 2.0, -0.5, 2.0]);
    }
}
