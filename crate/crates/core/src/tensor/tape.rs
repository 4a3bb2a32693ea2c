use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, bias: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Embedding { table: Var, indices: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Mean { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Wengert list of recorded operations. Nodes are appended in evaluation
/// order, so every input precedes its consumer and a reverse sweep visits
/// each node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a * b` (optionally accumulating into `c`), with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the bounds above cover every element the kernel touches, and
    // `c` is exclusively borrowed for the duration of the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    (y, dy)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf. Leaves whose tensor has `requires_grad` set receive a
    /// gradient on [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::dim(op, t.shape(), &[2]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a[m x k] . b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b: false }, tracked))
    }

    /// `a[m x k] . b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), &mut out, false);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b: true }, tracked))
    }

    /// Elementwise sum of equal shapes, or bias-add of a `[C]` vector over
    /// the last dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bias = if ta.shape() == tb.shape() {
            false
        } else if tb.shape().len() == 1 && tb.shape()[0] == ta.cols() {
            true
        } else {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        };
        let c = ta.cols();
        let data: Vec<f64> = if bias {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % c])
                .collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        };
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b, bias }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, tracked))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale { a, factor }, tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Row softmax restricted to entries where `allowed` is true. Disallowed
    /// entries get exactly zero weight, the same as adding `-inf` before the
    /// softmax; a fully disallowed row yields zeros.
    pub fn softmax_rows_masked(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(a).numel() {
            return Err(Error::dim("softmax mask", self.value(a).shape(), &[allowed.len()]));
        }
        Ok(self.softmax_impl(a, Some(allowed)))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let ok = |j: usize| allowed.is_none_or(|m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if ok(j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if ok(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, tracked)
    }

    /// Normalises each last-dimension vector to zero mean and unit variance
    /// (`eps = 1e-5` inside the square root), then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::dim("layernorm", tx.shape(), tg.shape()));
        }
        let r = tx.rows();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            tracked,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x).0).collect();
        let shape = ta.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_parts(shape, data), Op::Gelu { a }, tracked)
    }

    /// Gathers rows of a `[V x C]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, c) = self.matrix(table, "embedding")?;
        let tt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    bound: v,
                });
            }
            data.extend_from_slice(&tt.data()[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), c], data),
            Op::Embedding { table, indices: indices.to_vec() },
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_rows of zero inputs".into()));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::dim("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows { parts: parts.to_vec() },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_cols of zero inputs".into()));
        };
        if parts.len() == 1 {
            return Ok(first);
        }
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::dim("concat_cols", self.value(first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols { parts: parts.to_vec() },
            tracked,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        let tracked = self.tracked(a);
        Ok(self.push(t, Op::SliceRows { a, start }, tracked))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(Error::Index {
                what: "column slice",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols { a, start }, tracked))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel().max(1) as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(m), Op::Mean { a }, tracked)
    }

    /// Mean negative log-softmax of the target entries of each logit row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", &[n, v], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                bound: v,
            });
        }
        let tl = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss / n.max(1) as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            tracked,
        ))
    }

    /// Backpropagates from a single-element output with seed 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::dim("backward", self.value(out).shape(), &[1]));
        }
        self.backward_with(out, &[1.0])
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    /// Leaf gradients are accumulated into `Tensor::grad` of each leaf that
    /// requires it; previous gradients are replaced.
    pub fn backward_with(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::dim("backward seed", self.value(out).shape(), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let n = node.value.numel();
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = y.shape()[1];
                if self.tracked(*a) {
                    let da = grad_slot(grads, *a, m * k);
                    // da = g[m x n] . B^T, where B is the effective [k x n] operand.
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    gemm(m, n, k, g, (n, 1), tb.data(), bt, da, true);
                }
                if self.tracked(*b) {
                    let db = grad_slot(grads, *b, k * n);
                    if *trans_b {
                        // db[n x k] = g^T . a
                        gemm(n, m, k, g, (1, n), ta.data(), (k, 1), db, true);
                    } else {
                        // db[k x n] = a^T . g
                        gemm(k, m, n, ta.data(), (1, k), g, (n, 1), db, true);
                    }
                }
            }
            Op::Add { a, b, bias } => {
                if self.tracked(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.tracked(*b) {
                    if *bias {
                        let c = y.cols();
                        let db = grad_slot(grads, *b, c);
                        for (i, v) in g.iter().enumerate() {
                            db[i % c] += v;
                        }
                    } else {
                        add_into(&mut grads[b.0], g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d: Vec<f64> = g.iter().zip(tb.data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.tracked(*b) {
                    let d: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::Scale { a, factor } => {
                let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Softmax { a } => {
                let (r, c) = (y.rows(), y.cols());
                let da = grad_slot(grads, *a, r * c);
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        da[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = (y.rows(), y.cols());
                let tg = self.value(*gain);
                if self.tracked(*gain) {
                    let dg = grad_slot(grads, *gain, c);
                    for i in 0..r * c {
                        dg[i % c] += g[i] * xhat[i];
                    }
                }
                if self.tracked(*bias) {
                    let db = grad_slot(grads, *bias, c);
                    for i in 0..r * c {
                        db[i % c] += g[i];
                    }
                }
                if self.tracked(*x) {
                    let dx = grad_slot(grads, *x, r * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * tg.data()[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let ta = self.value(*a);
                let d: Vec<f64> = g.iter().zip(ta.data()).map(|(g, &x)| g * gelu(x).1).collect();
                add_into(&mut grads[a.0], &d);
            }
            Op::Embedding { table, indices } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let dt = grad_slot(grads, *table, tt.numel());
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        dt[i * c + j] += g[r * c + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.tracked(p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = (y.rows(), y.cols());
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.tracked(p) {
                        let dp = grad_slot(grads, p, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                dp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let ta = self.value(*a);
                let c = ta.cols();
                let da = grad_slot(grads, *a, ta.numel());
                for (d, v) in da[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::SliceCols { a, start } => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let len = y.cols();
                let da = grad_slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..len {
                        da[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let d = vec![g[0] / n as f64; n];
                add_into(&mut grads[a.0], &d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = self.value(*logits);
                let (n, v) = (tl.shape()[0], tl.shape()[1]);
                let scale = g[0] / n as f64;
                let dl = grad_slot(grads, *logits, n * v);
                for i in 0..n {
                    for j in 0..v {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                    }
                }
            }
        }
    }
}
