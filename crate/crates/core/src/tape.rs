//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations compute their values eagerly and record input ids. `backward`
//! walks the tape once in reverse insertion order, so gradient cost stays
//! proportional to forward cost. Interior gradients are freed as soon as
//! they have been pushed to their inputs; only leaf gradients survive.
//!
//! Index vectors (gather indices, CSR segment offsets) are shared through
//! `Rc` because the same adjacency is reused across layers and batches.

use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// x: [..., k] @ w: [k, n] -> [..., n]
    MatMul { x: Var, w: Var },
    /// x: [..., k] . v: [k] -> [...]
    MatVec { x: Var, v: Var },
    Add { x: Var, y: Var },
    Sub { x: Var, y: Var },
    Mul { x: Var, y: Var },
    /// x: [B, rest..] + v: [rest..], v broadcast over the leading axis
    AddBcast0 { x: Var, v: Var },
    Scale { x: Var, c: f64 },
    /// x: [.., d] * s: [..], s broadcast over the trailing axis
    MulBcastLast { x: Var, s: Var },
    Sigmoid { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Abs { x: Var },
    /// x: [n, rest..] -> [idx.len(), rest..]
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    /// x: [B, n, rest..] -> [B, idx.len(), rest..], same idx for every batch row
    GatherRowsB { x: Var, idx: Rc<Vec<usize>> },
    /// x: [B, n, rest..] -> [B, rest..], one row per batch element
    GatherRowPerBatch { x: Var, idx: Rc<Vec<usize>> },
    /// x: [e, rest..] -> [s, rest..]; offsets: s+1 entries partitioning 0..e
    SegmentSum { x: Var, offsets: Rc<Vec<usize>> },
    SegmentSumB { x: Var, offsets: Rc<Vec<usize>> },
    /// x: [B, e]; softmax within each offsets segment, per batch row
    SegmentSoftmaxB { x: Var, offsets: Rc<Vec<usize>> },
    /// Normalizes the trailing axis, then applies gain and bias.
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    LogSoftmaxLast { x: Var },
    /// x: [B, d] -> [B, m, d]
    ExpandMid { x: Var, m: usize },
    /// Rows start..start+len of the leading axis.
    Slice { x: Var, start: usize, len: usize },
    SumAll { x: Var },
}

struct Node {
    op: Op,
    val: Tensor,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn trailing(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1 required")
}

/// Element count of one leading-axis row.
fn row_size(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].val
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, val: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            val,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.val(x).shape(), self.val(w).shape());
        assert_eq!(ws.len(), 2, "matmul weight must be rank 2");
        let (k, n) = (ws[0], ws[1]);
        assert_eq!(trailing(xs), k, "matmul inner dims: {:?} @ {:?}", xs, ws);
        let m = self.val(x).numel() / k;
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.val(x).data(), self.val(w).data(), m, k, n, &mut out);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::MatMul { x, w }, Tensor::from_vec(&shape, out), rg)
    }

    pub fn matvec(&mut self, x: Var, v: Var) -> Var {
        let (xs, vs) = (self.val(x).shape(), self.val(v).shape());
        assert_eq!(vs.len(), 1, "matvec vector must be rank 1");
        let k = vs[0];
        assert_eq!(trailing(xs), k, "matvec inner dims: {:?} . {:?}", xs, vs);
        let m = self.val(x).numel() / k;
        let xd = self.val(x).data();
        let vd = self.val(v).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = dot(&xd[i * k..(i + 1) * k], vd);
        }
        let shape = xs[..xs.len() - 1].to_vec();
        let rg = self.rg(x) || self.rg(v);
        self.push(Op::MatVec { x, v }, Tensor::from_vec(&shape, out), rg)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        assert_eq!(self.val(x).shape(), self.val(y).shape(), "add shapes");
        let out: Vec<f64> = self
            .val(x)
            .data()
            .iter()
            .zip(self.val(y).data())
            .map(|(a, b)| a + b)
            .collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x) || self.rg(y);
        self.push(Op::Add { x, y }, t, rg)
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        assert_eq!(self.val(x).shape(), self.val(y).shape(), "sub shapes");
        let out: Vec<f64> = self
            .val(x)
            .data()
            .iter()
            .zip(self.val(y).data())
            .map(|(a, b)| a - b)
            .collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x) || self.rg(y);
        self.push(Op::Sub { x, y }, t, rg)
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Var {
        assert_eq!(self.val(x).shape(), self.val(y).shape(), "mul shapes");
        let out: Vec<f64> = self
            .val(x)
            .data()
            .iter()
            .zip(self.val(y).data())
            .map(|(a, b)| a * b)
            .collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x) || self.rg(y);
        self.push(Op::Mul { x, y }, t, rg)
    }

    pub fn add_bcast0(&mut self, x: Var, v: Var) -> Var {
        let (xs, vs) = (self.val(x).shape(), self.val(v).shape());
        assert!(!xs.is_empty() && &xs[1..] == vs, "add_bcast0 {:?} + {:?}", xs, vs);
        let r = self.val(v).numel();
        let xd = self.val(x).data();
        let vd = self.val(v).data();
        let mut out = xd.to_vec();
        if r > 0 {
            for chunk in out.chunks_mut(r) {
                for (a, b) in chunk.iter_mut().zip(vd) {
                    *a += b;
                }
            }
        }
        let t = Tensor::from_vec(xs, out);
        let rg = self.rg(x) || self.rg(v);
        self.push(Op::AddBcast0 { x, v }, t, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|a| a * c).collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, t, rg)
    }

    pub fn mul_bcast_last(&mut self, x: Var, s: Var) -> Var {
        let (xs, ss) = (self.val(x).shape(), self.val(s).shape());
        assert_eq!(&xs[..xs.len() - 1], ss, "mul_bcast_last {:?} * {:?}", xs, ss);
        let d = trailing(xs);
        let xd = self.val(x).data();
        let sd = self.val(s).data();
        let mut out = vec![0.0; xd.len()];
        for (i, &w) in sd.iter().enumerate() {
            for j in 0..d {
                out[i * d + j] = xd[i * d + j] * w;
            }
        }
        let t = Tensor::from_vec(xs, out);
        let rg = self.rg(x) || self.rg(s);
        self.push(Op::MulBcastLast { x, s }, t, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .val(x)
            .data()
            .iter()
            .map(|&a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x);
        self.push(Op::Sigmoid { x }, t, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out: Vec<f64> = self
            .val(x)
            .data()
            .iter()
            .map(|&a| if a > 0.0 { a } else { slope * a })
            .collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x);
        self.push(Op::LeakyRelu { x, slope }, t, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.val(x).data().iter().map(|a| a.abs()).collect();
        let t = Tensor::from_vec(self.val(x).shape(), out);
        let rg = self.rg(x);
        self.push(Op::Abs { x }, t, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xs = self.val(x).shape();
        let n = xs[0];
        let r = row_size(xs);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(idx.len() * r);
        for &i in idx.iter() {
            assert!(i < n, "gather_rows index {} out of {}", i, n);
            out.extend_from_slice(&xd[i * r..(i + 1) * r]);
        }
        let mut shape = xs.to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        self.push(Op::GatherRows { x, idx }, Tensor::from_vec(&shape, out), rg)
    }

    pub fn gather_rows_b(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xs = self.val(x).shape();
        assert!(xs.len() >= 2, "gather_rows_b needs a batch axis");
        let (b, n) = (xs[0], xs[1]);
        let r: usize = xs[2..].iter().product();
        let m = idx.len();
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(b * m * r);
        for bi in 0..b {
            let base = bi * n * r;
            for &i in idx.iter() {
                assert!(i < n, "gather_rows_b index {} out of {}", i, n);
                out.extend_from_slice(&xd[base + i * r..base + (i + 1) * r]);
            }
        }
        let mut shape = xs.to_vec();
        shape[1] = m;
        let rg = self.rg(x);
        self.push(Op::GatherRowsB { x, idx }, Tensor::from_vec(&shape, out), rg)
    }

    pub fn gather_row_per_batch(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xs = self.val(x).shape();
        assert!(xs.len() >= 2, "gather_row_per_batch needs a batch axis");
        let (b, n) = (xs[0], xs[1]);
        assert_eq!(idx.len(), b, "one index per batch row");
        let r: usize = xs[2..].iter().product();
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(b * r);
        for (bi, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather_row_per_batch index {} out of {}", i, n);
            let base = bi * n * r;
            out.extend_from_slice(&xd[base + i * r..base + (i + 1) * r]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&xs[2..]);
        let rg = self.rg(x);
        self.push(
            Op::GatherRowPerBatch { x, idx },
            Tensor::from_vec(&shape, out),
            rg,
        )
    }

    pub fn segment_sum(&mut self, x: Var, offsets: Rc<Vec<usize>>) -> Var {
        let xs = self.val(x).shape();
        let e = xs[0];
        let r = row_size(xs);
        let s = offsets.len() - 1;
        assert_eq!(*offsets.last().unwrap(), e, "offsets must cover all rows");
        let xd = self.val(x).data();
        let mut out = vec![0.0; s * r];
        for si in 0..s {
            let acc = &mut out[si * r..(si + 1) * r];
            for ei in offsets[si]..offsets[si + 1] {
                for (a, b) in acc.iter_mut().zip(&xd[ei * r..(ei + 1) * r]) {
                    *a += b;
                }
            }
        }
        let mut shape = xs.to_vec();
        shape[0] = s;
        let rg = self.rg(x);
        self.push(Op::SegmentSum { x, offsets }, Tensor::from_vec(&shape, out), rg)
    }

    pub fn segment_sum_b(&mut self, x: Var, offsets: Rc<Vec<usize>>) -> Var {
        let xs = self.val(x).shape();
        assert!(xs.len() >= 2, "segment_sum_b needs a batch axis");
        let (b, e) = (xs[0], xs[1]);
        let r: usize = xs[2..].iter().product();
        let s = offsets.len() - 1;
        assert_eq!(*offsets.last().unwrap(), e, "offsets must cover all rows");
        let xd = self.val(x).data();
        let mut out = vec![0.0; b * s * r];
        for bi in 0..b {
            let xbase = bi * e * r;
            let obase = bi * s * r;
            for si in 0..s {
                let acc = &mut out[obase + si * r..obase + (si + 1) * r];
                for ei in offsets[si]..offsets[si + 1] {
                    let src = &xd[xbase + ei * r..xbase + (ei + 1) * r];
                    for (a, c) in acc.iter_mut().zip(src) {
                        *a += c;
                    }
                }
            }
        }
        let mut shape = xs.to_vec();
        shape[1] = s;
        let rg = self.rg(x);
        self.push(
            Op::SegmentSumB { x, offsets },
            Tensor::from_vec(&shape, out),
            rg,
        )
    }

    pub fn segment_softmax_b(&mut self, x: Var, offsets: Rc<Vec<usize>>) -> Var {
        let xs = self.val(x).shape();
        assert_eq!(xs.len(), 2, "segment_softmax_b expects [batch, edges]");
        let (b, e) = (xs[0], xs[1]);
        assert_eq!(*offsets.last().unwrap(), e, "offsets must cover all edges");
        let xd = self.val(x).data();
        let mut out = vec![0.0; b * e];
        for bi in 0..b {
            let row = &xd[bi * e..(bi + 1) * e];
            let orow = &mut out[bi * e..(bi + 1) * e];
            for w in offsets.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                if lo == hi {
                    continue;
                }
                let mx = row[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in lo..hi {
                    let v = (row[i] - mx).exp();
                    orow[i] = v;
                    z += v;
                }
                for v in &mut orow[lo..hi] {
                    *v /= z;
                }
            }
        }
        let t = Tensor::from_vec(xs, out);
        let rg = self.rg(x);
        self.push(Op::SegmentSoftmaxB { x, offsets }, t, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xs = self.val(x).shape();
        let d = trailing(xs);
        assert_eq!(self.val(gain).shape(), &[d], "layer_norm gain shape");
        assert_eq!(self.val(bias).shape(), &[d], "layer_norm bias shape");
        let xd = self.val(x).data();
        let gd = self.val(gain).data();
        let bd = self.val(bias).data();
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv) = row_stats(row, eps);
            for j in 0..d {
                orow[j] = gd[j] * (row[j] - mean) * inv + bd[j];
            }
        }
        let t = Tensor::from_vec(xs, out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Op::LayerNorm { x, gain, bias, eps }, t, rg)
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let xs = self.val(x).shape();
        let d = trailing(xs);
        let xd = self.val(x).data();
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..d {
                orow[j] = row[j] - lse;
            }
        }
        let t = Tensor::from_vec(xs, out);
        let rg = self.rg(x);
        self.push(Op::LogSoftmaxLast { x }, t, rg)
    }

    pub fn expand_mid(&mut self, x: Var, m: usize) -> Var {
        let xs = self.val(x).shape();
        assert_eq!(xs.len(), 2, "expand_mid expects [batch, dim]");
        let (b, d) = (xs[0], xs[1]);
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(b * m * d);
        for bi in 0..b {
            let row = &xd[bi * d..(bi + 1) * d];
            for _ in 0..m {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(x);
        self.push(Op::ExpandMid { x, m }, Tensor::from_vec(&[b, m, d], out), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.val(x).shape();
        let n = xs[0];
        assert!(start + len <= n, "slice {}..{} out of {}", start, start + len, n);
        let r = row_size(xs);
        let out = self.val(x).data()[start * r..(start + len) * r].to_vec();
        let mut shape = xs.to_vec();
        shape[0] = len;
        let rg = self.rg(x);
        self.push(Op::Slice { x, start, len }, Tensor::from_vec(&shape, out), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), rg)
    }

    /// Backpropagates from a scalar loss. Returns gradients for leaves that
    /// require grad; everything else is freed on the way down.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.val(loss).numel(), 1, "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Grads { g };
        }
        g[loss.0] = Some(Tensor::full(self.val(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if g[i].is_none() || !self.nodes[i].requires_grad {
                g[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let gi = g[i].take().unwrap();
            self.backprop_node(i, &gi, &mut g);
        }
        Grads { g }
    }

    fn accum(&self, g: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut g[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>]) {
        let gd = gi.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let ws = self.val(*w).shape();
                let (k, n) = (ws[0], ws[1]);
                let m = self.val(*x).numel() / k;
                if self.rg(*x) {
                    let wd = self.val(*w).data();
                    let mut dx = vec![0.0; m * k];
                    for r in 0..m {
                        let gr = &gd[r * n..(r + 1) * n];
                        let dr = &mut dx[r * k..(r + 1) * k];
                        for l in 0..k {
                            dr[l] = dot(gr, &wd[l * n..(l + 1) * n]);
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(self.val(*x).shape(), dx));
                }
                if self.rg(*w) {
                    let xd = self.val(*x).data();
                    let mut dw = vec![0.0; k * n];
                    for r in 0..m {
                        let gr = &gd[r * n..(r + 1) * n];
                        let xr = &xd[r * k..(r + 1) * k];
                        for l in 0..k {
                            let a = xr[l];
                            if a == 0.0 {
                                continue;
                            }
                            let dr = &mut dw[l * n..(l + 1) * n];
                            for j in 0..n {
                                dr[j] += a * gr[j];
                            }
                        }
                    }
                    self.accum(g, *w, Tensor::from_vec(ws, dw));
                }
            }
            Op::MatVec { x, v } => {
                let k = self.val(*v).shape()[0];
                let m = self.val(*x).numel() / k;
                if self.rg(*x) {
                    let vd = self.val(*v).data();
                    let mut dx = vec![0.0; m * k];
                    for r in 0..m {
                        let a = gd[r];
                        for l in 0..k {
                            dx[r * k + l] = a * vd[l];
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(self.val(*x).shape(), dx));
                }
                if self.rg(*v) {
                    let xd = self.val(*x).data();
                    let mut dv = vec![0.0; k];
                    for r in 0..m {
                        let a = gd[r];
                        if a == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            dv[l] += a * xd[r * k + l];
                        }
                    }
                    self.accum(g, *v, Tensor::from_vec(&[k], dv));
                }
            }
            Op::Add { x, y } => {
                self.accum(g, *x, gi.clone());
                self.accum(g, *y, gi.clone());
            }
            Op::Sub { x, y } => {
                self.accum(g, *x, gi.clone());
                if self.rg(*y) {
                    let dy: Vec<f64> = gd.iter().map(|a| -a).collect();
                    self.accum(g, *y, Tensor::from_vec(gi.shape(), dy));
                }
            }
            Op::Mul { x, y } => {
                if self.rg(*x) {
                    let yd = self.val(*y).data();
                    let dx: Vec<f64> = gd.iter().zip(yd).map(|(a, b)| a * b).collect();
                    self.accum(g, *x, Tensor::from_vec(gi.shape(), dx));
                }
                if self.rg(*y) {
                    let xd = self.val(*x).data();
                    let dy: Vec<f64> = gd.iter().zip(xd).map(|(a, b)| a * b).collect();
                    self.accum(g, *y, Tensor::from_vec(gi.shape(), dy));
                }
            }
            Op::AddBcast0 { x, v } => {
                self.accum(g, *x, gi.clone());
                if self.rg(*v) {
                    let r = self.val(*v).numel();
                    let mut dv = vec![0.0; r];
                    if r > 0 {
                        for chunk in gd.chunks(r) {
                            for (a, b) in dv.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                    }
                    self.accum(g, *v, Tensor::from_vec(self.val(*v).shape(), dv));
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let dx: Vec<f64> = gd.iter().map(|a| a * c).collect();
                    self.accum(g, *x, Tensor::from_vec(gi.shape(), dx));
                }
            }
            Op::MulBcastLast { x, s } => {
                let d = trailing(self.val(*x).shape());
                if self.rg(*x) {
                    let sd = self.val(*s).data();
                    let mut dx = vec![0.0; gd.len()];
                    for (r, &w) in sd.iter().enumerate() {
                        for j in 0..d {
                            dx[r * d + j] = gd[r * d + j] * w;
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(self.val(*x).shape(), dx));
                }
                if self.rg(*s) {
                    let xd = self.val(*x).data();
                    let rows = self.val(*s).numel();
                    let mut ds = vec![0.0; rows];
                    for r in 0..rows {
                        ds[r] = dot(&gd[r * d..(r + 1) * d], &xd[r * d..(r + 1) * d]);
                    }
                    self.accum(g, *s, Tensor::from_vec(self.val(*s).shape(), ds));
                }
            }
            Op::Sigmoid { x } => {
                if self.rg(*x) {
                    let yd = self.nodes[i].val.data();
                    let dx: Vec<f64> = gd
                        .iter()
                        .zip(yd)
                        .map(|(a, y)| a * y * (1.0 - y))
                        .collect();
                    self.accum(g, *x, Tensor::from_vec(gi.shape(), dx));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.rg(*x) {
                    let xd = self.val(*x).data();
                    let dx: Vec<f64> = gd
                        .iter()
                        .zip(xd)
                        .map(|(a, &b)| if b > 0.0 { *a } else { a * slope })
                        .collect();
                    self.accum(g, *x, Tensor::from_vec(gi.shape(), dx));
                }
            }
            Op::Abs { x } => {
                if self.rg(*x) {
                    let xd = self.val(*x).data();
                    let dx: Vec<f64> = gd
                        .iter()
                        .zip(xd)
                        .map(|(a, &b)| {
                            if b > 0.0 {
                                *a
                            } else if b < 0.0 {
                                -*a
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accum(g, *x, Tensor::from_vec(gi.shape(), dx));
                }
            }
            Op::GatherRows { x, idx } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let r = row_size(xs);
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    for (o, &src) in idx.iter().enumerate() {
                        let grow = &gd[o * r..(o + 1) * r];
                        for (a, b) in dx[src * r..(src + 1) * r].iter_mut().zip(grow) {
                            *a += b;
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::GatherRowsB { x, idx } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let (b, n) = (xs[0], xs[1]);
                    let r: usize = xs[2..].iter().product();
                    let m = idx.len();
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    for bi in 0..b {
                        let gbase = bi * m * r;
                        let xbase = bi * n * r;
                        for (o, &src) in idx.iter().enumerate() {
                            let grow = &gd[gbase + o * r..gbase + (o + 1) * r];
                            let dst = &mut dx[xbase + src * r..xbase + (src + 1) * r];
                            for (a, c) in dst.iter_mut().zip(grow) {
                                *a += c;
                            }
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::GatherRowPerBatch { x, idx } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let n = xs[1];
                    let r: usize = xs[2..].iter().product();
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    for (bi, &src) in idx.iter().enumerate() {
                        let grow = &gd[bi * r..(bi + 1) * r];
                        let base = bi * n * r;
                        for (a, c) in dx[base + src * r..base + (src + 1) * r]
                            .iter_mut()
                            .zip(grow)
                        {
                            *a += c;
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::SegmentSum { x, offsets } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let r = row_size(xs);
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    for (si, w) in offsets.windows(2).enumerate() {
                        let grow = &gd[si * r..(si + 1) * r];
                        for ei in w[0]..w[1] {
                            dx[ei * r..(ei + 1) * r].copy_from_slice(grow);
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::SegmentSumB { x, offsets } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let (b, e) = (xs[0], xs[1]);
                    let r: usize = xs[2..].iter().product();
                    let s = offsets.len() - 1;
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    for bi in 0..b {
                        let gbase = bi * s * r;
                        let xbase = bi * e * r;
                        for (si, w) in offsets.windows(2).enumerate() {
                            let grow = &gd[gbase + si * r..gbase + (si + 1) * r];
                            for ei in w[0]..w[1] {
                                dx[xbase + ei * r..xbase + (ei + 1) * r].copy_from_slice(grow);
                            }
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::SegmentSoftmaxB { x, offsets } => {
                if self.rg(*x) {
                    let yd = self.nodes[i].val.data();
                    let xs = self.val(*x).shape();
                    let (b, e) = (xs[0], xs[1]);
                    let mut dx = vec![0.0; b * e];
                    for bi in 0..b {
                        let base = bi * e;
                        for w in offsets.windows(2) {
                            let (lo, hi) = (base + w[0], base + w[1]);
                            let mut t = 0.0;
                            for j in lo..hi {
                                t += gd[j] * yd[j];
                            }
                            for j in lo..hi {
                                dx[j] = yd[j] * (gd[j] - t);
                            }
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = trailing(self.val(*x).shape());
                let xd = self.val(*x).data();
                let gaind = self.val(*gain).data();
                let rows = xd.len() / d;
                let mut dx = if self.rg(*x) { vec![0.0; xd.len()] } else { vec![] };
                let mut dgain = if self.rg(*gain) { vec![0.0; d] } else { vec![] };
                let mut dbias = if self.rg(*bias) { vec![0.0; d] } else { vec![] };
                let mut xhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let (mean, inv) = row_stats(row, *eps);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                    }
                    if self.rg(*x) {
                        let mut mh = 0.0;
                        let mut mhx = 0.0;
                        for j in 0..d {
                            let h = grow[j] * gaind[j];
                            mh += h;
                            mhx += h * xhat[j];
                        }
                        mh /= d as f64;
                        mhx /= d as f64;
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let h = grow[j] * gaind[j];
                            drow[j] = inv * (h - mh - xhat[j] * mhx);
                        }
                    }
                    if self.rg(*gain) {
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                        }
                    }
                    if self.rg(*bias) {
                        for j in 0..d {
                            dbias[j] += grow[j];
                        }
                    }
                }
                if self.rg(*x) {
                    self.accum(g, *x, Tensor::from_vec(self.val(*x).shape(), dx));
                }
                if self.rg(*gain) {
                    self.accum(g, *gain, Tensor::from_vec(&[d], dgain));
                }
                if self.rg(*bias) {
                    self.accum(g, *bias, Tensor::from_vec(&[d], dbias));
                }
            }
            Op::LogSoftmaxLast { x } => {
                if self.rg(*x) {
                    let yd = self.nodes[i].val.data();
                    let d = trailing(self.val(*x).shape());
                    let mut dx = vec![0.0; yd.len()];
                    for r in 0..yd.len() / d {
                        let grow = &gd[r * d..(r + 1) * d];
                        let yrow = &yd[r * d..(r + 1) * d];
                        let s: f64 = grow.iter().sum();
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] = grow[j] - yrow[j].exp() * s;
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(self.val(*x).shape(), dx));
                }
            }
            Op::ExpandMid { x, m } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let (b, d) = (xs[0], xs[1]);
                    let mut dx = vec![0.0; b * d];
                    for bi in 0..b {
                        for mi in 0..*m {
                            let grow = &gd[(bi * m + mi) * d..(bi * m + mi + 1) * d];
                            for (a, c) in dx[bi * d..(bi + 1) * d].iter_mut().zip(grow) {
                                *a += c;
                            }
                        }
                    }
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::Slice { x, start, len } => {
                if self.rg(*x) {
                    let xs = self.val(*x).shape();
                    let r = row_size(xs);
                    let mut dx = vec![0.0; self.val(*x).numel()];
                    dx[start * r..(start + len) * r].copy_from_slice(gd);
                    self.accum(g, *x, Tensor::from_vec(xs, dx));
                }
            }
            Op::SumAll { x } => {
                if self.rg(*x) {
                    let s = gd[0];
                    self.accum(g, *x, Tensor::full(self.val(*x).shape(), s));
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn matmul_kernel(x: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (l, &a) in xr.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &w[l * n..(l + 1) * n];
            for j in 0..n {
                or[j] += a * wr[j];
            }
        }
    }
}
