//! A small reverse-mode automatic differentiation tape over row-major `f64`
//! matrices. Every node is a `rows x cols` matrix; scalars are `1 x 1`.
//!
//! Leaves are either tracked (gradients are accumulated for them) or constant.
//! [`Tape::stop_grad`] copies a value into a constant leaf while remembering its
//! source, so the cut is visible when inspecting the graph.

use alloc::vec;
use alloc::vec::Vec;

const LN_EPS: f64 = 1e-5;
/// Gather index meaning "write zero" (used for convolution padding).
pub const PAD: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(#[allow(dead_code)] Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Modulate { x: Var, scale: Var, shift: Var },
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Relu(Var),
    Softplus(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    SoftmaxRows(Var),
    Gather { src: Var, index: Vec<u32> },
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// `None` when no gradient reached `v` (constant, stop-gradient, or unused).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.idx()).and_then(Option::take)
    }
}

// ---- dense kernels -------------------------------------------------------

/// `out[n x m] += a[n x k] * b[k x m]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n x m] += a[n x k] * b[m x k]^T`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out[k x m] += a[n x k]^T * b[n x m]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let ar = &a[r * k..(r + 1) * k];
        let br = &b[r * m..(r + 1) * m];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx()];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx()].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.idx()].value.len(), 1);
        self.nodes[v.idx()].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Leaf, true)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn stop_grad(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let value = self.value(v).to_vec();
        self.push(r, c, value, Op::StopGrad(v), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a), self.value(b), &mut out, n, k, m);
        let g = self.ng(a) || self.ng(b);
        self.push(n, m, out, Op::MatMul(a, b), g)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dimension");
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a), self.value(b), &mut out, n, k, m);
        let g = self.ng(a) || self.ng(b);
        self.push(n, m, out, Op::MatMulT(a, b), g)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise shape");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let g = self.ng(a) || self.ng(b);
        self.push(r, c, out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "row broadcast shape");
        let rv = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(rv).map(|(&p, &q)| f(p, q))).collect();
        let g = self.ng(a) || self.ng(row);
        self.push(r, c, out, op, g)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_op(a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// `x * (1 + scale) + shift` with `scale`, `shift` broadcast as rows.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(scale), (1, c));
        assert_eq!(self.shape(shift), (1, c));
        let sc = self.value(scale);
        let sh = self.value(shift);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(sc.iter().zip(sh)).map(|(&v, (&a, &b))| v * (1.0 + a) + b))
            .collect();
        let g = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(r, c, out, Op::Modulate { x, scale, shift }, g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|v| v * k).collect();
        let g = self.ng(a);
        self.push(r, c, out, Op::Scale(a, k), g)
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|v| v + k).collect();
        let g = self.ng(a);
        self.push(r, c, out, Op::Offset(a), g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&v| f(v)).collect();
        let g = self.ng(a);
        self.push(r, c, out, op, g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[i] = s;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = self.ng(x);
        self.push(r, c, out, Op::LayerNorm { x, rstd }, g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let g = self.ng(a);
        self.push(r, c, out, Op::SoftmaxRows(a), g)
    }

    /// `out[i] = src[index[i]]` (flat indices), `PAD` writes zero.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, index: Vec<u32>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let sv = self.value(src);
        let out = index.iter().map(|&i| if i == PAD { 0.0 } else { sv[i as usize] }).collect();
        let g = self.ng(src);
        self.push(rows, cols, out, Op::Gather { src, index }, g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        assert!(parts.iter().all(|&p| self.shape(p).0 == rows), "concat rows");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(rows, total, out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(src);
        assert!(start + len <= c, "slice out of range");
        let sv = self.value(src);
        let out = (0..r).flat_map(|i| sv[i * c + start..i * c + start + len].iter().copied()).collect();
        let g = self.ng(src);
        self.push(r, len, out, Op::SliceCols { src, start }, g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.ng(a);
        self.push(1, 1, vec![m], Op::Mean(a), g)
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape");
        let av = self.value(a);
        let bv = self.value(b);
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let m = s / av.len() as f64;
        let g = self.ng(a) || self.ng(b);
        self.push(1, 1, vec![m], Op::Mse(a, b), g)
    }

    /// Weighted sum of scalars.
    pub fn combine(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s),
            });
        }
        acc.expect("combine needs at least one term")
    }

    /// Backward sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.backward_with(root, &[1.0])
    }

    /// Backward sweep seeded with `d(objective)/d(root)`.
    pub fn backward_with(&self, root: Var, seed: &[f64]) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        assert_eq!(seed.len(), self.value(root).len(), "seed length");
        if self.ng(root) {
            grads[root.idx()] = Some(seed.to_vec());
        }
        for id in (0..=root.idx()).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = cols;
                if self.ng(*a) {
                    let ga = accumulate(&mut grads[a.idx()], n * k);
                    gemm_nt(gout, self.value(*b), ga, n, m, k);
                }
                if self.ng(*b) {
                    let gb = accumulate(&mut grads[b.idx()], k * m);
                    gemm_tn(self.value(*a), gout, gb, n, k, m);
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = self.shape(*a);
                let m = cols;
                if self.ng(*a) {
                    let ga = accumulate(&mut grads[a.idx()], n * k);
                    gemm_nn(gout, self.value(*b), ga, n, m, k);
                }
                if self.ng(*b) {
                    let gb = accumulate(&mut grads[b.idx()], m * k);
                    gemm_tn(gout, self.value(*a), gb, n, m, k);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    for (g, d) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if self.ng(*b) {
                    for (g, d) in accumulate(&mut grads[b.idx()], gout.len()).iter_mut().zip(gout) {
                        *g += sign * d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b);
                    for ((g, d), y) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout).zip(bv) {
                        *g += d * y;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a);
                    for ((g, d), x) in accumulate(&mut grads[b.idx()], gout.len()).iter_mut().zip(gout).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    for (g, d) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if self.ng(*row) {
                    let gr = accumulate(&mut grads[row.idx()], cols);
                    for chunk in gout.chunks(cols) {
                        for (g, d) in gr.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    let rv = self.value(*row);
                    let ga = accumulate(&mut grads[a.idx()], gout.len());
                    for (gch, dch) in ga.chunks_mut(cols).zip(gout.chunks(cols)) {
                        for ((g, d), r) in gch.iter_mut().zip(dch).zip(rv) {
                            *g += d * r;
                        }
                    }
                }
                if self.ng(*row) {
                    let av = self.value(*a);
                    let gr = accumulate(&mut grads[row.idx()], cols);
                    for (ach, dch) in av.chunks(cols).zip(gout.chunks(cols)) {
                        for ((g, d), x) in gr.iter_mut().zip(dch).zip(ach) {
                            *g += d * x;
                        }
                    }
                }
            }
            Op::Modulate { x, scale, shift } => {
                let xv = self.value(*x);
                if self.ng(*x) {
                    let sc = self.value(*scale);
                    let gx = accumulate(&mut grads[x.idx()], gout.len());
                    for (gch, dch) in gx.chunks_mut(cols).zip(gout.chunks(cols)) {
                        for ((g, d), s) in gch.iter_mut().zip(dch).zip(sc) {
                            *g += d * (1.0 + s);
                        }
                    }
                }
                if self.ng(*scale) {
                    let gs = accumulate(&mut grads[scale.idx()], cols);
                    for (xch, dch) in xv.chunks(cols).zip(gout.chunks(cols)) {
                        for ((g, d), v) in gs.iter_mut().zip(dch).zip(xch) {
                            *g += d * v;
                        }
                    }
                }
                if self.ng(*shift) {
                    let gs = accumulate(&mut grads[shift.idx()], cols);
                    for dch in gout.chunks(cols) {
                        for (g, d) in gs.iter_mut().zip(dch) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.ng(*a) {
                    for (g, d) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout) {
                        *g += k * d;
                    }
                }
            }
            Op::Offset(a) => {
                if self.ng(*a) {
                    for (g, d) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Silu(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    for ((g, d), &x) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout).zip(av) {
                        let s = sigmoid(x);
                        *g += d * (s + x * s * (1.0 - s));
                    }
                }
            }
            Op::Relu(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    for ((g, d), &x) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout).zip(av) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    for ((g, d), &x) in accumulate(&mut grads[a.idx()], gout.len()).iter_mut().zip(gout).zip(av) {
                        *g += d * sigmoid(x);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.ng(*x) {
                    let y = &node.value;
                    let gx = accumulate(&mut grads[x.idx()], gout.len());
                    for i in 0..rows {
                        let dy = &gout[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let mean_dy = dy.iter().sum::<f64>() / cols as f64;
                        let mean_dyy = dy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gx[i * cols + j] += rstd[i] * (dy[j] - mean_dy - yr[j] * mean_dyy);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let ga = accumulate(&mut grads[a.idx()], gout.len());
                    for i in 0..rows {
                        let dy = &gout[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let dot: f64 = dy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ga[i * cols + j] += yr[j] * (dy[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { src, index } => {
                if self.ng(*src) {
                    let len = self.value(*src).len();
                    let gs = accumulate(&mut grads[src.idx()], len);
                    for (&i, d) in index.iter().zip(gout) {
                        if i != PAD {
                            gs[i as usize] += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        let gp = accumulate(&mut grads[p.idx()], rows * w);
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] += gout[i * cols + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { src, start } => {
                if self.ng(*src) {
                    let sc = self.shape(*src).1;
                    let gs = accumulate(&mut grads[src.idx()], rows * sc);
                    for i in 0..rows {
                        for j in 0..cols {
                            gs[i * sc + start + j] += gout[i * cols + j];
                        }
                    }
                }
            }
            Op::Mean(a) => {
                if self.ng(*a) {
                    let len = self.value(*a).len();
                    let d = gout[0] / len as f64;
                    for g in accumulate(&mut grads[a.idx()], len).iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = 2.0 * gout[0] / av.len() as f64;
                if self.ng(*a) {
                    for ((g, x), y) in accumulate(&mut grads[a.idx()], av.len()).iter_mut().zip(av).zip(bv) {
                        *g += k * (x - y);
                    }
                }
                if self.ng(*b) {
                    for ((g, x), y) in accumulate(&mut grads[b.idx()], av.len()).iter_mut().zip(av).zip(bv) {
                        *g -= k * (x - y);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(scalar)/d(leaf) for a tape-building closure.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, init: Vec<f64>, rows: usize, cols: usize) {
        let mut t = Tape::new();
        let x = t.leaf(rows, cols, init.clone());
        let y = build(&mut t, x);
        let grads = t.backward(y);
        let g = grads.get(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..init.len() {
            let eval = |delta: f64| {
                let mut v = init.clone();
                v[i] += delta;
                let mut t = Tape::new();
                let x = t.leaf(rows, cols, v);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g[i]).abs() / (1e-8 + fd.abs().max(g[i].abs()));
            assert!(err < 1e-6 || (fd - g[i]).abs() < 1e-9, "entry {i}: fd {fd} vs analytic {}", g[i]);
        }
    }

    fn vals(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| libm::sin(seed + 1.7 * i as f64) * 0.9).collect()
    }

    #[test]
    fn matmul_family() {
        check(
            |t, x| {
                let b = t.constant(3, 2, vals(6, 0.3));
                let y = t.matmul(x, b);
                let z = t.matmul_t(y, y);
                let w = t.matmul_t(x, x);
                let s = t.add(z, w);
                t.mean(s)
            },
            vals(12, 0.1),
            4,
            3,
        );
        check(
            |t, x| {
                let a = t.constant(2, 4, vals(8, 1.3));
                let y = t.matmul(a, x);
                let s = t.silu(y);
                t.mean(s)
            },
            vals(12, 0.5),
            4,
            3,
        );
    }

    #[test]
    fn norm_softmax_and_modulation() {
        check(
            |t, x| {
                let ln = t.layer_norm(x);
                let sc = t.slice_cols(x, 1, 2);
                let r0 = t.gather(sc, 1, 3, vec![0, 3, 5]);
                let m = t.modulate(ln, r0, r0);
                let sm = t.softmax_rows(m);
                let w = t.constant(4, 3, vals(12, 2.0));
                t.mse(sm, w)
            },
            vals(12, 0.7),
            4,
            3,
        );
    }

    #[test]
    fn structural_ops() {
        check(
            |t, x| {
                let g = t.gather(x, 2, 3, vec![5, PAD, 0, 0, 3, 11]);
                let c = t.concat_cols(&[g, g]);
                let r = t.constant(1, 6, vals(6, 0.9));
                let a = t.add_row(c, r);
                let m = t.mul_row(a, r);
                let p = t.softplus(m);
                let q = t.offset(p, -0.3);
                let u = t.mul(q, q);
                let v = t.sub(u, q);
                let w = t.scale(v, 1.5);
                t.mean(w)
            },
            vals(12, 0.2),
            3,
            4,
        );
    }

    #[test]
    fn stop_grad_cuts_flow() {
        let mut t = Tape::new();
        let x = t.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let c = t.stop_grad(x);
        let y = t.mse(x, c);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(g.get(c).is_none());
    }
}
