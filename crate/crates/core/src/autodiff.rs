//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! Each forward op appends a node holding its output value; `backward`
//! replays the tape in reverse and accumulates gradients per node. The op
//! set is exactly what the towers, fusion encoder and heads need — nothing
//! speculative. Every op's gradient is pinned by a central-difference test
//! at the bottom of this file; those tests are the correctness oracle the
//! rest of the crate leans on.

use crate::tensor::{Scalar, Tensor};

pub type VarId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(VarId, VarId),
    /// A · Bᵀ
    MatMulNT(VarId, VarId),
    Add(VarId, VarId),
    /// (m,n) + broadcast (1,n)
    AddRow(VarId, VarId),
    Scale(VarId, T),
    Gelu(VarId),
    Tanh(VarId),
    /// Row-wise softmax over columns; masked-out columns get probability 0.
    /// (The mask is applied at forward time; masked outputs are exactly zero,
    /// so backward needs only the output values.)
    MaskedSoftmax { x: VarId },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    GatherRows {
        src: VarId,
        ids: Vec<usize>,
    },
    SliceRows {
        x: VarId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    /// Full 3x3 conv, padding 1, over an (h*w, c_in) map.
    Conv3x3 {
        x: VarId,
        w: VarId,
        b: VarId,
        h: usize,
        wdim: usize,
        stride: usize,
    },
    /// Depthwise 3x3 conv, padding 1.
    DwConv3x3 {
        x: VarId,
        w: VarId,
        b: VarId,
        h: usize,
        wdim: usize,
        stride: usize,
    },
    /// Mean cross-entropy over rows of logits against integer targets.
    CrossEntropyMean {
        logits: VarId,
        targets: Vec<usize>,
    },
    /// Σ cᵢ·xᵢ over same-shaped inputs.
    AddScaledN(Vec<(VarId, T)>),
    SumAll(VarId),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    label: Option<Box<str>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn set_label(&mut self, id: VarId, label: &str) {
        self.nodes[id].label = Some(label.into());
    }

    /// First node (in creation order) containing a NaN/Inf, if any.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                None
            } else {
                let name = n
                    .label
                    .as_deref()
                    .map(str::to_owned)
                    .unwrap_or_else(|| format!("{:?}", n.op).split(['(', ' ', '{']).next().unwrap_or("op").to_owned());
                Some((i, name))
            }
        })
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            label: None,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, x: VarId, row: VarId) -> VarId {
        let (rows, cols) = self.value(x).shape();
        assert_eq!(self.value(row).shape(), (1, cols), "add_row shape");
        let mut v = self.value(x).clone();
        for r in 0..rows {
            for (o, &b) in v.row_mut(r).iter_mut().zip(self.value(row).data()) {
                *o = *o + b;
            }
        }
        let _ = rows;
        self.push(Op::AddRow(x, row), v)
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let mut v = self.value(x).clone();
        v.scale_assign(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let mut v = self.value(x).clone();
        for a in v.data_mut() {
            *a = gelu(*a);
        }
        self.push(Op::Gelu(x), v)
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let mut v = self.value(x).clone();
        for a in v.data_mut() {
            *a = a.tanh();
        }
        self.push(Op::Tanh(x), v)
    }

    /// `mask[j] = true` keeps key column j; `None` keeps all.
    pub fn masked_softmax(&mut self, x: VarId, mask: Option<Vec<bool>>) -> VarId {
        let xv = self.value(x);
        if let Some(m) = &mask {
            assert_eq!(m.len(), xv.cols(), "softmax mask length");
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            softmax_row_in_place(v.row_mut(r), mask.as_deref());
        }
        self.push(Op::MaskedSoftmax { x }, v)
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        let xv = self.value(x);
        let cols = xv.cols();
        assert_eq!(self.value(gain).shape(), (1, cols), "layer_norm gain");
        assert_eq!(self.value(bias).shape(), (1, cols), "layer_norm bias");
        let mut v = Tensor::zeros(xv.rows(), cols);
        let eps = T::from_f64(LN_EPS);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (mean, inv) = ln_stats(row, eps);
            let g = self.value(gain).row(0);
            let b = self.value(bias).row(0);
            let out = v.row_mut(r);
            for j in 0..cols {
                out[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias }, v)
    }

    pub fn gather_rows(&mut self, src: VarId, ids: Vec<usize>) -> VarId {
        let sv = self.value(src);
        let mut v = Tensor::zeros(ids.len(), sv.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < sv.rows(), "gather_rows id {} out of {}", id, sv.rows());
            v.row_mut(r).copy_from_slice(sv.row(id));
        }
        self.push(Op::GatherRows { src, ids }, v)
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let mut v = Tensor::zeros(len, xv.cols());
        for r in 0..len {
            v.row_mut(r).copy_from_slice(xv.row(start + r));
        }
        self.push(Op::SliceRows { x, start, len }, v)
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start, len }, v)
    }

    pub fn concat_rows(&mut self, parts: Vec<VarId>) -> VarId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            for r in 0..pv.rows() {
                v.row_mut(at + r).copy_from_slice(pv.row(r));
            }
            at += pv.rows();
        }
        self.push(Op::ConcatRows(parts), v)
    }

    pub fn concat_cols(&mut self, parts: Vec<VarId>) -> VarId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[at..at + pv.cols()].copy_from_slice(pv.row(r));
            }
            at += pv.cols();
        }
        self.push(Op::ConcatCols(parts), v)
    }

    pub fn conv3x3(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        h: usize,
        wdim: usize,
        stride: usize,
    ) -> VarId {
        let v = conv3x3_forward(self.value(x), self.value(w), self.value(b), h, wdim, stride);
        self.push(
            Op::Conv3x3 {
                x,
                w,
                b,
                h,
                wdim,
                stride,
            },
            v,
        )
    }

    pub fn dwconv3x3(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        h: usize,
        wdim: usize,
        stride: usize,
    ) -> VarId {
        let v = dwconv3x3_forward(self.value(x), self.value(w), self.value(b), h, wdim, stride);
        self.push(
            Op::DwConv3x3 {
                x,
                w,
                b,
                h,
                wdim,
                stride,
            },
            v,
        )
    }

    pub fn cross_entropy_mean(&mut self, logits: VarId, targets: Vec<usize>) -> VarId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count");
        let n = T::from_f64(targets.len() as f64);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols(), "cross_entropy target out of range");
            let row = lv.row(r);
            total = total + (log_sum_exp(row) - row[t]);
        }
        let v = Tensor::scalar(total / n);
        self.push(Op::CrossEntropyMean { logits, targets }, v)
    }

    pub fn add_scaled(&mut self, terms: Vec<(VarId, T)>) -> VarId {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].0).shape();
        let mut v = Tensor::zeros(shape.0, shape.1);
        for &(id, c) in &terms {
            assert_eq!(self.value(id).shape(), shape, "add_scaled shape");
            for (o, &x) in v.data_mut().iter_mut().zip(self.value(id).data()) {
                *o = *o + c * x;
            }
        }
        self.push(Op::AddScaledN(terms), v)
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Reverse pass from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor<T>>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root not scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(T::one()));

        for i in (0..self.nodes.len()).rev() {
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        grads
    }

    fn backward_node(&self, i: usize, go: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = go.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(go);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = go.matmul(self.value(*b));
                let db = go.matmul_tn(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, go.clone());
                accumulate(grads, *b, go.clone());
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, go.clone());
                let mut dr = Tensor::zeros(1, go.cols());
                for r in 0..go.rows() {
                    for (o, &g) in dr.row_mut(0).iter_mut().zip(go.row(r)) {
                        *o = *o + g;
                    }
                }
                accumulate(grads, *row, dr);
            }
            Op::Scale(x, c) => {
                let mut dx = go.clone();
                dx.scale_assign(*c);
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = go.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d = *d * gelu_grad(xi);
                }
                accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[i].value;
                let mut dx = go.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *d = *d * (T::one() - y * y);
                }
                accumulate(grads, *x, dx);
            }
            Op::MaskedSoftmax { x } => {
                let y = &self.nodes[i].value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = go.row(r);
                    let mut dot = T::zero();
                    for (&yi, &gi) in yr.iter().zip(gr.iter()) {
                        dot = dot + yi * gi;
                    }
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let cols = xv.cols();
                let eps = T::from_f64(LN_EPS);
                let nf = T::from_f64(cols as f64);
                let mut dx = Tensor::zeros(xv.rows(), cols);
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, inv) = ln_stats(row, eps);
                    let gr = go.row(r);
                    let g = gv.row(0);
                    // dy_hat = go ⊙ gain; dx = inv·(dy_hat − m1 − x̂·m2)
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..cols {
                        let xh = (row[j] - mean) * inv;
                        let dyh = gr[j] * g[j];
                        m1 = m1 + dyh;
                        m2 = m2 + dyh * xh;
                        dg.row_mut(0)[j] = dg.row(0)[j] + gr[j] * xh;
                        db.row_mut(0)[j] = db.row(0)[j] + gr[j];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for j in 0..cols {
                        let xh = (row[j] - mean) * inv;
                        dx.row_mut(r)[j] = inv * (gr[j] * g[j] - m1 - xh * m2);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::GatherRows { src, ids } => {
                let sv = self.value(*src);
                let mut ds = Tensor::zeros(sv.rows(), sv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &g) in ds.row_mut(id).iter_mut().zip(go.row(r)) {
                        *o = *o + g;
                    }
                }
                accumulate(grads, *src, ds);
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..*len {
                    dx.row_mut(start + r).copy_from_slice(go.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(go.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        dp.row_mut(r).copy_from_slice(go.row(at + r));
                    }
                    at += pv.rows();
                    accumulate(grads, p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        dp.row_mut(r).copy_from_slice(&go.row(r)[at..at + pv.cols()]);
                    }
                    at += pv.cols();
                    accumulate(grads, p, dp);
                }
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                h,
                wdim,
                stride,
            } => {
                let (dx, dw, db) = conv3x3_backward(
                    self.value(*x),
                    self.value(*w),
                    go,
                    *h,
                    *wdim,
                    *stride,
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::DwConv3x3 {
                x,
                w,
                b,
                h,
                wdim,
                stride,
            } => {
                let (dx, dw, db) = dwconv3x3_backward(
                    self.value(*x),
                    self.value(*w),
                    go,
                    *h,
                    *wdim,
                    *stride,
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let lv = self.value(*logits);
                let scale = go.item() / T::from_f64(targets.len() as f64);
                let mut dl = Tensor::zeros(lv.rows(), lv.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row(r);
                    let lse = log_sum_exp(row);
                    for (j, d) in dl.row_mut(r).iter_mut().enumerate() {
                        let p = (row[j] - lse).exp();
                        let y = if j == t { T::one() } else { T::zero() };
                        *d = (p - y) * scale;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::AddScaledN(terms) => {
                for &(id, c) in terms {
                    let mut d = go.clone();
                    d.scale_assign(c);
                    accumulate(grads, id, d);
                }
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let g = go.item();
                for d in dx.data_mut() {
                    *d = g;
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: VarId, delta: Tensor<T>) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation, smooth everywhere
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

fn softmax_row_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if keep(j) && x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        // fully masked row: all-zero distribution
        for x in row.iter_mut() {
            *x = T::zero();
        }
        return;
    }
    let mut sum = T::zero();
    for j in 0..row.len() {
        if keep(j) {
            row[j] = (row[j] - max).exp();
            sum = sum + row[j];
        } else {
            row[j] = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn ln_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean = mean + x;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &x in row {
        let d = x - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, (var + eps).sqrt().recip())
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in row {
        sum = sum + (x - max).exp();
    }
    sum.ln() + max
}

pub fn conv_out_dim(dim: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1
    (dim - 1) / stride + 1
}

fn conv3x3_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    h: usize,
    wdim: usize,
    stride: usize,
) -> Tensor<T> {
    let c_in = x.cols();
    let c_out = w.rows();
    assert_eq!(x.rows(), h * wdim, "conv3x3 input shape");
    assert_eq!(w.cols(), c_in * 9, "conv3x3 weight shape");
    assert_eq!(b.shape(), (1, c_out), "conv3x3 bias shape");
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(wdim, stride));
    let mut out = Tensor::zeros(oh * ow, c_out);
    for r in 0..oh * ow {
        out.row_mut(r).copy_from_slice(b.row(0));
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = oy * ow + ox;
            for dy in 0..3usize {
                let iy = (oy * stride + dy).wrapping_sub(1);
                if iy >= h {
                    continue;
                }
                for dx in 0..3usize {
                    let ix = (ox * stride + dx).wrapping_sub(1);
                    if ix >= wdim {
                        continue;
                    }
                    let xrow = x.row(iy * wdim + ix);
                    let k = dy * 3 + dx;
                    for co in 0..c_out {
                        let wrow = w.row(co);
                        let mut acc = T::zero();
                        for (ci, &xv) in xrow.iter().enumerate() {
                            acc = acc + xv * wrow[ci * 9 + k];
                        }
                        let cur = out.get(orow, co);
                        out.set(orow, co, cur + acc);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    go: &Tensor<T>,
    h: usize,
    wdim: usize,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c_in = x.cols();
    let c_out = w.rows();
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(wdim, stride));
    let mut dx = Tensor::zeros(x.rows(), c_in);
    let mut dw = Tensor::zeros(c_out, c_in * 9);
    let mut db = Tensor::zeros(1, c_out);
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = oy * ow + ox;
            let grow = go.row(orow);
            for (co, &g) in grow.iter().enumerate() {
                db.row_mut(0)[co] = db.row(0)[co] + g;
            }
            for dy in 0..3usize {
                let iy = (oy * stride + dy).wrapping_sub(1);
                if iy >= h {
                    continue;
                }
                for dxp in 0..3usize {
                    let ix = (ox * stride + dxp).wrapping_sub(1);
                    if ix >= wdim {
                        continue;
                    }
                    let irow = iy * wdim + ix;
                    let k = dy * 3 + dxp;
                    for (co, &g) in grow.iter().enumerate() {
                        let wrow = w.row(co);
                        let dwrow = dw.row_mut(co);
                        let xrow = x.row(irow);
                        for ci in 0..c_in {
                            dwrow[ci * 9 + k] = dwrow[ci * 9 + k] + g * xrow[ci];
                        }
                        let dxrow = dx.row_mut(irow);
                        for ci in 0..c_in {
                            dxrow[ci] = dxrow[ci] + g * wrow[ci * 9 + k];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn dwconv3x3_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    h: usize,
    wdim: usize,
    stride: usize,
) -> Tensor<T> {
    let c = x.cols();
    assert_eq!(x.rows(), h * wdim, "dwconv3x3 input shape");
    assert_eq!(w.shape(), (c, 9), "dwconv3x3 weight shape");
    assert_eq!(b.shape(), (1, c), "dwconv3x3 bias shape");
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(wdim, stride));
    let mut out = Tensor::zeros(oh * ow, c);
    for r in 0..oh * ow {
        out.row_mut(r).copy_from_slice(b.row(0));
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = oy * ow + ox;
            for dy in 0..3usize {
                let iy = (oy * stride + dy).wrapping_sub(1);
                if iy >= h {
                    continue;
                }
                for dx in 0..3usize {
                    let ix = (ox * stride + dx).wrapping_sub(1);
                    if ix >= wdim {
                        continue;
                    }
                    let xrow = x.row(iy * wdim + ix);
                    let k = dy * 3 + dx;
                    let orow_s = out.row_mut(orow);
                    for ci in 0..c {
                        orow_s[ci] = orow_s[ci] + xrow[ci] * w.get(ci, k);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn dwconv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    go: &Tensor<T>,
    h: usize,
    wdim: usize,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.cols();
    let (oh, ow) = (conv_out_dim(h, stride), conv_out_dim(wdim, stride));
    let mut dx = Tensor::zeros(x.rows(), c);
    let mut dw = Tensor::zeros(c, 9);
    let mut db = Tensor::zeros(1, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = oy * ow + ox;
            let grow = go.row(orow);
            for ci in 0..c {
                db.row_mut(0)[ci] = db.row(0)[ci] + grow[ci];
            }
            for dy in 0..3usize {
                let iy = (oy * stride + dy).wrapping_sub(1);
                if iy >= h {
                    continue;
                }
                for dxp in 0..3usize {
                    let ix = (ox * stride + dxp).wrapping_sub(1);
                    if ix >= wdim {
                        continue;
                    }
                    let irow = iy * wdim + ix;
                    let k = dy * 3 + dxp;
                    let xrow = x.row(irow);
                    for ci in 0..c {
                        let g = grow[ci];
                        dw.set(ci, k, dw.get(ci, k) + g * xrow[ci]);
                        let cur = dx.get(irow, ci);
                        dx.set(irow, ci, cur + g * w.get(ci, k));
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference oracle: rebuild the graph at θ±ε per coordinate and
    /// compare against the tape gradient.
    fn fd_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let eps = 1e-6;
        for (pi, input) in inputs.iter().enumerate() {
            let analytic = grads[ids[pi]].clone().unwrap_or_else(|| {
                Tensor::zeros(input.rows(), input.cols())
            });
            for ci in 0..input.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let ids: Vec<VarId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == pi {
                                t.data_mut()[ci] += delta;
                            }
                            tape.leaf(t)
                        })
                        .collect();
                    let root = build(&mut tape, &ids);
                    tape.value(root).item()
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let ana = analytic.data()[ci];
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "input {pi} coord {ci}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::trunc_normal(rows, cols, 0.8, &mut rng)
    }

    #[test]
    fn grad_matmul_chain() {
        fd_check(
            &[randn(3, 4, 1), randn(4, 2, 2), randn(3, 2, 3)],
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let s = t.add(m, ids[2]);
                t.sum_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_nt() {
        fd_check(
            &[randn(3, 4, 4), randn(5, 4, 5)],
            |t, ids| {
                let m = t.matmul_nt(ids[0], ids[1]);
                t.sum_all(m)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_add_row_scale_gelu_tanh() {
        fd_check(
            &[randn(4, 3, 6), randn(1, 3, 7)],
            |t, ids| {
                let a = t.add_row(ids[0], ids[1]);
                let g = t.gelu(a);
                let h = t.tanh(g);
                let s = t.scale(h, 1.7);
                t.sum_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_masked_softmax() {
        fd_check(
            &[randn(3, 5, 8), randn(3, 5, 9)],
            |t, ids| {
                let p = t.masked_softmax(ids[0], Some(vec![true, true, false, true, false]));
                // weight probabilities by a second input so the grad is non-trivial
                let w = t.add(p, ids[1]);
                let q = t.gelu(w);
                t.sum_all(q)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_layer_norm() {
        fd_check(
            &[randn(4, 6, 10), randn(1, 6, 11), randn(1, 6, 12)],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]);
                let g = t.gelu(y);
                t.sum_all(g)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_gather_slice_concat() {
        fd_check(
            &[randn(6, 4, 13), randn(2, 4, 14)],
            |t, ids| {
                let g = t.gather_rows(ids[0], vec![1, 1, 4, 0]);
                let top = t.slice_rows(g, 0, 2);
                let mix = t.add(top, ids[1]);
                let left = t.slice_cols(mix, 0, 2);
                let right = t.slice_cols(mix, 2, 2);
                let swapped = t.concat_cols(vec![right, left]);
                let tall = t.concat_rows(vec![swapped, mix]);
                t.sum_all(tall)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_conv3x3() {
        for stride in [1usize, 2] {
            fd_check(
                &[randn(16, 2, 15), randn(3, 18, 16), randn(1, 3, 17)],
                |t, ids| {
                    let y = t.conv3x3(ids[0], ids[1], ids[2], 4, 4, stride);
                    let g = t.gelu(y);
                    t.sum_all(g)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn grad_dwconv3x3() {
        for stride in [1usize, 2] {
            fd_check(
                &[randn(16, 3, 18), randn(3, 9, 19), randn(1, 3, 20)],
                |t, ids| {
                    let y = t.dwconv3x3(ids[0], ids[1], ids[2], 4, 4, stride);
                    let g = t.gelu(y);
                    t.sum_all(g)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn grad_cross_entropy() {
        fd_check(
            &[randn(3, 7, 21)],
            |t, ids| t.cross_entropy_mean(ids[0], vec![2, 0, 6]),
            1e-6,
        );
    }

    #[test]
    fn grad_add_scaled() {
        fd_check(
            &[randn(1, 1, 22), randn(1, 1, 23)],
            |t, ids| t.add_scaled(vec![(ids[0], 0.3), (ids[1], 1.2)]),
            1e-6,
        );
    }

    #[test]
    fn conv_out_dims() {
        assert_eq!(conv_out_dim(24, 1), 24);
        assert_eq!(conv_out_dim(24, 2), 12);
        assert_eq!(conv_out_dim(8, 2), 4);
    }

    #[test]
    fn masked_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(4, 6, 30));
        let mask = vec![true, false, true, true, false, true];
        let p = tape.masked_softmax(x, Some(mask.clone()));
        let pv = tape.value(p);
        for r in 0..4 {
            let row = pv.row(r);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (j, &m) in mask.iter().enumerate() {
                if !m {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(2, 10));
        let l = tape.cross_entropy_mean(x, vec![3, 7]);
        assert!((tape.value(l).item() - (10.0f64).ln()).abs() < 1e-12);
    }
}
