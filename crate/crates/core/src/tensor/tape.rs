//! Computation tape: records primitive operations and replays them in
//! reverse for gradient computation.
//!
//! The tape is an append-only arena, so tape order is already a topological
//! order of the graph; backward walks it once in reverse and accumulates
//! gradients additively at fan-out nodes. A tape and its tensors are confined
//! to one thread; parallelism happens across independent tapes.

use super::{Scalar, Tensor, TensorError};

const LOG_EPS: f64 = 1e-12;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `scale * x + shift`, elementwise; only the scale matters in reverse.
    Affine {
        x: NodeId,
        scale: T,
    },
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        pad: usize,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxLast(NodeId),
    Log(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    /// Broadcast add of a rank-1 bias over the last axis.
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    SmoothL1 {
        pred: NodeId,
        target: NodeId,
    },
}

pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, mut t: Tensor<T>, requires_grad: bool) -> NodeId {
        t.set_requires_grad(requires_grad);
        *t.grad_mut() = None;
        self.nodes.push(t);
        self.ops.push(Op::Leaf);
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad()
    }

    /// Gradient copied into a plain tensor (zeros if none was accumulated).
    pub fn grad_tensor(&self, id: NodeId) -> Tensor<T> {
        let node = &self.nodes[id.0];
        match node.grad() {
            Some(g) => Tensor::from_vec(node.shape(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(node.shape()),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        let mut t = Tensor::from_vec(&shape, data).expect("internal shape bookkeeping");
        t.set_requires_grad(requires_grad);
        self.nodes.push(t);
        self.ops.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad()
    }

    #[cfg(debug_assertions)]
    fn check_finite(&self, id: NodeId, op: &'static str) -> Result<NodeId, TensorError> {
        if self.nodes[id.0].all_finite() {
            Ok(id)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    #[cfg(not(debug_assertions))]
    fn check_finite(&self, id: NodeId, _op: &'static str) -> Result<NodeId, TensorError> {
        Ok(id)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        let id = self.push(shape, data, rg, op);
        self.check_finite(id, op_name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let data = tx.data().iter().map(|&v| scale * v + shift).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        let id = self.push(shape, data, rg, Op::Affine { x, scale });
        self.check_finite(id, "affine")
    }

    pub fn scale(&mut self, x: NodeId, scale: T) -> Result<NodeId, TensorError> {
        self.affine(x, scale, T::ZERO)
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: NodeId,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        let id = self.push(shape, data, rg, op);
        self.check_finite(id, op_name)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(
            "sigmoid",
            x,
            |v| T::ONE / (T::ONE + (-v).exp()),
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(
            "relu",
            x,
            |v| if v > T::ZERO { v } else { T::ZERO },
            Op::Relu(x),
        )
    }

    /// Natural log with inputs clamped at 1e-12 to guard `log(0)`.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let eps = T::from_f64(LOG_EPS);
        self.unary("log", x, |v| v.maximum(eps).ln(), Op::Log(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let shape = tx.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "softmax_last",
                shape,
                msg: "needs at least one axis".into(),
            });
        }
        let n = *shape.last().unwrap();
        let rows = tx.numel() / n;
        let mut data = vec![T::ZERO; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut sum = T::ZERO;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[r * n + i] = e;
                sum += e;
            }
            for v in &mut data[r * n..(r + 1) * n] {
                *v = *v / sum;
            }
        }
        let rg = self.requires(x);
        let id = self.push(shape, data, rg, Op::SoftmaxLast(x));
        self.check_finite(id, "softmax_last")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let mut s = T::ZERO;
        for &v in tx.data() {
            s += v;
        }
        let rg = self.requires(x);
        let id = self.push(vec![], vec![s], rg, Op::SumAll(x));
        self.check_finite(id, "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let n = tx.numel();
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_all",
                shape: tx.shape().to_vec(),
                msg: "mean of empty tensor".into(),
            });
        }
        let mut s = T::ZERO;
        for &v in tx.data() {
            s += v;
        }
        let m = s / T::from_f64(n as f64);
        let rg = self.requires(x);
        let id = self.push(vec![], vec![m], rg, Op::MeanAll(x));
        self.check_finite(id, "mean_all")
    }

    /// Matrix product of two rank-2 tensors `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        let id = self.push(vec![m, n], out, rg, Op::MatMul(a, b));
        self.check_finite(id, "matmul")
    }

    /// 2-D convolution, stride 1, zero padding `pad` on all sides.
    /// Input `[h, w, c_in]`, kernel `[kh, kw, c_in, c_out]`,
    /// output `[h + 2 pad - kh + 1, w + 2 pad - kw + 1, c_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (ti, tk) = (&self.nodes[input.0], &self.nodes[kernel.0]);
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (h, w, c_in) = (si[0], si[1], si[2]);
        let (kh, kw, c_out) = (sk[0], sk[1], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: si.to_vec(),
                msg: format!("kernel {kh}x{kw} larger than padded input"),
            });
        }
        let h_out = h + 2 * pad - kh + 1;
        let w_out = w + 2 * pad - kw + 1;
        let mut out = vec![T::ZERO; h_out * w_out * c_out];
        conv2d_forward(
            ti.data(),
            tk.data(),
            &mut out,
            ConvDims {
                h,
                w,
                c_in,
                kh,
                kw,
                c_out,
                pad,
                h_out,
                w_out,
            },
        );
        let rg = self.requires(input) || self.requires(kernel);
        let id = self.push(
            vec![h_out, w_out, c_out],
            out,
            rg,
            Op::Conv2d { input, kernel, pad },
        );
        self.check_finite(id, "conv2d")
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                msg: "no parts".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                msg: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.nodes[p.0].shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        let row = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let t = &self.nodes[p.0];
            let len = t.shape()[axis] * inner;
            for o in 0..outer {
                let src = &t.data()[o * len..(o + 1) * len];
                data[o * row + offset..o * row + offset + len].copy_from_slice(src);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        let id = self.push(
            shape,
            data,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        );
        self.check_finite(id, "concat")
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let s = tx.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: s,
                msg: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut data = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = &tx.data()[(o * s[axis] + start) * inner..(o * s[axis] + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let rg = self.requires(x);
        let id = self.push(
            shape,
            data,
            rg,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        );
        self.check_finite(id, "slice")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let tx = &self.nodes[x.0];
        let numel: usize = shape.iter().product();
        if numel != tx.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot reshape {:?}", tx.shape()),
            });
        }
        let data = tx.data().to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// `x + bias` with rank-1 `bias` broadcast over the last axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (tx, tb) = (&self.nodes[x.0], &self.nodes[bias.0]);
        let c = *tx.shape().last().unwrap_or(&0);
        if tb.shape().len() != 1 || tb.shape()[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.requires(x) || self.requires(bias);
        let id = self.push(shape, data, rg, Op::AddBias { x, bias });
        self.check_finite(id, "add_bias")
    }

    /// Elementwise smooth-L1: `0.5 d^2` if `|d| < 1` else `|d| - 0.5`,
    /// with `d = pred - target`.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        let half = T::from_f64(0.5);
        self.binary_same_shape(
            "smooth_l1",
            pred,
            target,
            |p, t| {
                let d = p - t;
                if d.abs() < T::ONE {
                    half * d * d
                } else {
                    d.abs() - half
                }
            },
            Op::SmoothL1 { pred, target },
        )
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape().to_vec(),
            });
        }
        *self.nodes[loss.0].grad_mut() = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad().is_none() || !self.nodes[i].requires_grad() {
                continue;
            }
            let op = self.ops[i].clone();
            self.backward_step(NodeId(i), &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        if !self.nodes[id.0].requires_grad() {
            return;
        }
        let n = self.nodes[id.0].numel();
        let slot = self.nodes[id.0].grad_mut();
        let g = slot.get_or_insert_with(|| vec![T::ZERO; n]);
        for (gv, &d) in g.iter_mut().zip(delta) {
            *gv += d;
        }
    }

    fn backward_step(&mut self, out: NodeId, op: &Op<T>) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub(a, b) => {
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                self.accumulate(a, &g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let g = self.nodes[out.0].grad().unwrap();
                if self.nodes[a.0].requires_grad() {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.nodes[b.0].data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad() {
                    let db: Vec<T> = self.nodes[out.0]
                        .grad()
                        .unwrap()
                        .iter()
                        .zip(self.nodes[a.0].data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Affine { x, scale } => {
                let dx: Vec<T> = self.nodes[out.0]
                    .grad()
                    .unwrap()
                    .iter()
                    .map(|&g| scale * g)
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::MatMul(a, b) => {
                let (m, n) = {
                    let s = self.nodes[out.0].shape();
                    (s[0], s[1])
                };
                let k = self.nodes[a.0].shape()[1];
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                if self.nodes[a.0].requires_grad() {
                    // dA = dC * B^T
                    let mut da = vec![T::ZERO; m * k];
                    let bd = self.nodes[b.0].data();
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::ZERO;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.nodes[b.0].requires_grad() {
                    // dB = A^T * dC
                    let mut db = vec![T::ZERO; k * n];
                    let ad = self.nodes[a.0].data();
                    for p in 0..k {
                        for i in 0..m {
                            let av = ad[i * k + p];
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Conv2d { input, kernel, pad } => {
                let dims = {
                    let si = self.nodes[input.0].shape();
                    let sk = self.nodes[kernel.0].shape();
                    let so = self.nodes[out.0].shape();
                    ConvDims {
                        h: si[0],
                        w: si[1],
                        c_in: si[2],
                        kh: sk[0],
                        kw: sk[1],
                        c_out: sk[3],
                        pad,
                        h_out: so[0],
                        w_out: so[1],
                    }
                };
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                if self.nodes[input.0].requires_grad() {
                    let mut di = vec![T::ZERO; self.nodes[input.0].numel()];
                    conv2d_backward_input(&g, self.nodes[kernel.0].data(), &mut di, dims);
                    self.accumulate(input, &di);
                }
                if self.nodes[kernel.0].requires_grad() {
                    let mut dk = vec![T::ZERO; self.nodes[kernel.0].numel()];
                    conv2d_backward_kernel(&g, self.nodes[input.0].data(), &mut dk, dims);
                    self.accumulate(kernel, &dk);
                }
            }
            Op::Sigmoid(x) => {
                let dx: Vec<T> = self.nodes[out.0]
                    .grad()
                    .unwrap()
                    .iter()
                    .zip(self.nodes[out.0].data())
                    .map(|(&g, &y)| g * y * (T::ONE - y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<T> = self.nodes[out.0]
                    .grad()
                    .unwrap()
                    .iter()
                    .zip(self.nodes[out.0].data())
                    .map(|(&g, &y)| g * (T::ONE - y * y))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<T> = self.nodes[out.0]
                    .grad()
                    .unwrap()
                    .iter()
                    .zip(self.nodes[x.0].data())
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::SoftmaxLast(x) => {
                let y = self.nodes[out.0].data();
                let g = self.nodes[out.0].grad().unwrap();
                let n = *self.nodes[out.0].shape().last().unwrap();
                let rows = y.len() / n;
                let mut dx = vec![T::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::ZERO;
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    for i in 0..n {
                        dx[r * n + i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Log(x) => {
                let eps = T::from_f64(LOG_EPS);
                let dx: Vec<T> = self.nodes[out.0]
                    .grad()
                    .unwrap()
                    .iter()
                    .zip(self.nodes[x.0].data())
                    .map(|(&g, &v)| g / v.maximum(eps))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::SumAll(x) => {
                let g = self.nodes[out.0].grad().unwrap()[0];
                let dx = vec![g; self.nodes[x.0].numel()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].numel();
                let g = self.nodes[out.0].grad().unwrap()[0] / T::from_f64(n as f64);
                let dx = vec![g; n];
                self.accumulate(x, &dx);
            }
            Op::Concat { ref parts, axis } => {
                let shape = self.nodes[out.0].shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape()[axis] * inner;
                    if self.nodes[p.0].requires_grad() {
                        let mut dp = vec![T::ZERO; outer * len];
                        for o in 0..outer {
                            dp[o * len..(o + 1) * len]
                                .copy_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let s = self.nodes[x.0].shape().to_vec();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let g = self.nodes[out.0].grad().unwrap();
                let mut dx = vec![T::ZERO; self.nodes[x.0].numel()];
                for o in 0..outer {
                    let dst = &mut dx[(o * s[axis] + start) * inner..(o * s[axis] + start + len) * inner];
                    dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                self.accumulate(x, &g);
            }
            Op::AddBias { x, bias } => {
                let g = self.nodes[out.0].grad().unwrap().to_vec();
                self.accumulate(x, &g);
                if self.nodes[bias.0].requires_grad() {
                    let c = self.nodes[bias.0].numel();
                    let mut db = vec![T::ZERO; c];
                    for row in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::SmoothL1 { pred, target } => {
                let g = self.nodes[out.0].grad().unwrap();
                let dp: Vec<T> = g
                    .iter()
                    .zip(
                        self.nodes[pred.0]
                            .data()
                            .iter()
                            .zip(self.nodes[target.0].data()),
                    )
                    .map(|(&gv, (&p, &t))| {
                        let d = (p - t).maximum(-T::ONE).minimum(T::ONE);
                        gv * d
                    })
                    .collect();
                if self.nodes[pred.0].requires_grad() {
                    self.accumulate(pred, &dp);
                }
                if self.nodes[target.0].requires_grad() {
                    let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
                    self.accumulate(target, &dt);
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], out: &mut [T], d: ConvDims) {
    let pad = d.pad as isize;
    for y_out in 0..d.h_out {
        for x_out in 0..d.w_out {
            let orow = &mut out[(y_out * d.w_out + x_out) * d.c_out..][..d.c_out];
            for ky in 0..d.kh {
                let y_in = y_out as isize + ky as isize - pad;
                if y_in < 0 || y_in >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let x_in = x_out as isize + kx as isize - pad;
                    if x_in < 0 || x_in >= d.w as isize {
                        continue;
                    }
                    let ipix = &input[((y_in as usize) * d.w + x_in as usize) * d.c_in..][..d.c_in];
                    let kbase = ((ky * d.kw + kx) * d.c_in) * d.c_out;
                    for (ci, &a) in ipix.iter().enumerate() {
                        if a == T::ZERO {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * d.c_out..][..d.c_out];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += a * kv;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input<T: Scalar>(grad_out: &[T], kernel: &[T], grad_in: &mut [T], d: ConvDims) {
    let pad = d.pad as isize;
    for y_out in 0..d.h_out {
        for x_out in 0..d.w_out {
            let grow = &grad_out[(y_out * d.w_out + x_out) * d.c_out..][..d.c_out];
            for ky in 0..d.kh {
                let y_in = y_out as isize + ky as isize - pad;
                if y_in < 0 || y_in >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let x_in = x_out as isize + kx as isize - pad;
                    if x_in < 0 || x_in >= d.w as isize {
                        continue;
                    }
                    let gpix =
                        &mut grad_in[((y_in as usize) * d.w + x_in as usize) * d.c_in..][..d.c_in];
                    let kbase = ((ky * d.kw + kx) * d.c_in) * d.c_out;
                    for (ci, gp) in gpix.iter_mut().enumerate() {
                        let krow = &kernel[kbase + ci * d.c_out..][..d.c_out];
                        let mut s = T::ZERO;
                        for (&g, &kv) in grow.iter().zip(krow) {
                            s += g * kv;
                        }
                        *gp += s;
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel<T: Scalar>(grad_out: &[T], input: &[T], grad_k: &mut [T], d: ConvDims) {
    let pad = d.pad as isize;
    for y_out in 0..d.h_out {
        for x_out in 0..d.w_out {
            let grow = &grad_out[(y_out * d.w_out + x_out) * d.c_out..][..d.c_out];
            for ky in 0..d.kh {
                let y_in = y_out as isize + ky as isize - pad;
                if y_in < 0 || y_in >= d.h as isize {
                    continue;
                }
                for kx in 0..d.kw {
                    let x_in = x_out as isize + kx as isize - pad;
                    if x_in < 0 || x_in >= d.w as isize {
                        continue;
                    }
                    let ipix = &input[((y_in as usize) * d.w + x_in as usize) * d.c_in..][..d.c_in];
                    let kbase = ((ky * d.kw + kx) * d.c_in) * d.c_out;
                    for (ci, &a) in ipix.iter().enumerate() {
                        if a == T::ZERO {
                            continue;
                        }
                        let krow = &mut grad_k[kbase + ci * d.c_out..][..d.c_out];
                        for (kv, &g) in krow.iter_mut().zip(grow) {
                            *kv += a * g;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of a scalar loss with respect to a single input tensor,
/// leaving every other leaf untouched.
///
/// `build_loss` receives the tape and the input's node id and must return a
/// scalar loss node. Used for input-space attacks where model parameters are
/// attached as constants and therefore accumulate no gradient.
pub fn input_gradient<T: Scalar, F>(input: &Tensor<T>, build_loss: F) -> Result<Tensor<T>, TensorError>
where
    F: FnOnce(&mut Tape<T>, NodeId) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let loss = build_loss(&mut tape, x)?;
    tape.backward(loss)?;
    Ok(tape.grad_tensor(x))
}
