//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every forward pass builds a fresh [`Graph`]. Nodes are appended in
//! execution order, so parents always precede children and the backward pass
//! is a single reverse sweep. A graph can be differentiated once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

/// Binary elementwise operation tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        out_channels: usize,
    },
    ChannelAdd {
        x: Var,
        v: Var,
        per_sample: bool,
    },
    MatMul(Var, Var),
    RowAdd(Var, Var),
    Act(Activation, Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    SelectRows {
        table: Var,
        rows: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Accumulated gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
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

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match op {
            Elementwise::Add => ta.zip_map(tb, |x, y| x + y),
            Elementwise::Sub => ta.zip_map(tb, |x, y| x - y),
            Elementwise::Mul => ta.zip_map(tb, |x, y| x * y),
        }
        .map_err(|_| Error::shape(op_name(op), ta.shape(), tb.shape()))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// Multiplies by a scalar. `scale(x, 1.0)` returns bit-identical values.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// 2-D convolution without bias. `input` is NCHW, `kernel` is OIHW.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            n,
            o,
            self.value(input).data(),
            self.value(kernel).data(),
        );
        let out = Tensor::new(vec![n, o, geom.out_h, geom.out_w], data)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                out_channels: o,
            },
            rg,
        ))
    }

    /// Adds a per-channel vector to an NCHW tensor. `v` is either `[C]`
    /// (shared across the batch) or `[N, C]` (one vector per sample).
    pub fn channel_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("channel_add", &xs, &vs));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let per_sample = match vs.as_slice() {
            [cc] if *cc == c => false,
            [nn, cc] if *nn == n && *cc == c => true,
            _ => return Err(Error::shape("channel_add", &xs, &vs)),
        };
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let (b, ch) = (i / c, i % c);
            let add = if per_sample { vd[b * c + ch] } else { vd[ch] };
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::ChannelAdd { x, v, per_sample }, rg))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a `[N]` bias to every row of an `[M, N]` matrix.
    pub fn row_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if as_.len() != 2 || bs != [as_[1]] {
            return Err(Error::shape("row_add", &as_, &bs));
        }
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(as_[1]) {
            row.iter_mut().zip(&bd).for_each(|(e, b)| *e += b);
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::RowAdd(a, bias), rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Silu => self.value(x).map(|v| v * sigmoid(v)),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Act(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(Activation::Silu, x)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("upsample2x", format!("expected NCHW, got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xo] = src[p * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let out = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 4 || bs.len() != 4 || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(Error::shape("concat_channels", &as_, &bs));
        }
        let hw = as_[2] * as_[3];
        let (ca, cb) = (as_[1] * hw, bs[1] * hw);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..as_[0] {
            out.extend_from_slice(&da[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&db[n * cb..(n + 1) * cb]);
        }
        let out = Tensor::new(vec![as_[0], as_[1] + bs[1], as_[2], as_[3]], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    /// Gathers rows of a `[R, D]` table. `None` yields a zero row.
    pub fn select_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || rows.is_empty() {
            return Err(Error::invalid("select_rows", format!("table shape {ts:?}")));
        }
        let d = ts[1];
        let src = self.value(table).data();
        let mut out = vec![0.0; rows.len() * d];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= ts[0] {
                    return Err(Error::invalid(
                        "select_rows",
                        format!("row {r} out of range for {} rows", ts[0]),
                    ));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::SelectRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || labels.iter().any(|&l| l >= ls[1]) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits {ls:?} vs {} labels", labels.len()),
            ));
        }
        let k = ls[1];
        let mut total = 0.0;
        for (row, &l) in self.value(logits).data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each node on a gradient path is
    /// processed exactly once; the graph cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild the forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    Elementwise::Add => {
                        if wants(a) {
                            accumulate(grads, a, g.iter().copied());
                        }
                        if wants(b) {
                            accumulate(grads, b, g.iter().copied());
                        }
                    }
                    Elementwise::Sub => {
                        if wants(a) {
                            accumulate(grads, a, g.iter().copied());
                        }
                        if wants(b) {
                            accumulate(grads, b, g.iter().map(|v| -v));
                        }
                    }
                    Elementwise::Mul => {
                        let (va, vb) = (self.value(a).data(), self.value(b).data());
                        if wants(a) {
                            accumulate(grads, a, g.iter().zip(vb).map(|(g, y)| g * y));
                        }
                        if wants(b) {
                            accumulate(grads, b, g.iter().zip(va).map(|(g, x)| g * x));
                        }
                    }
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|v| v * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.iter().copied()),
            Op::Conv2d {
                input,
                kernel,
                geom,
                out_channels,
            } => {
                let n = self.shape(*input)[0];
                let (dx, dk) = kernels::conv2d_backward(
                    geom,
                    n,
                    *out_channels,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *kernel, dk);
                }
            }
            Op::ChannelAdd { x, v, per_sample } => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().copied());
                }
                if wants(*v) {
                    let xs = self.shape(*x);
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let mut dv = vec![0.0; self.value(*v).len()];
                    for (j, chunk) in g.chunks(hw).enumerate() {
                        let idx = if *per_sample { j } else { j % c };
                        dv[idx] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, *v, dv);
                }
            }
            Op::MatMul(a, b) => {
                let (as_, bs) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (as_[0], as_[1], bs[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.value(*b).data(), true, 0.0, &mut da);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, g, false, 0.0, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::RowAdd(a, bias) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Act(kind, x) => {
                let xv = self.value(*x).data();
                match kind {
                    Activation::Relu => accumulate(
                        grads,
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }),
                    ),
                    Activation::Silu => accumulate(
                        grads,
                        *x,
                        g.iter().zip(xv).map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        }),
                    ),
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xo / 2] +=
                                g[p * 4 * h * w + y * 2 * w + xo];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatChannels(a, b) => {
                let (as_, bs) = (self.shape(*a), self.shape(*b));
                let hw = as_[2] * as_[3];
                let (ca, cb) = (as_[1] * hw, bs[1] * hw);
                let n = as_[0];
                if wants(*a) {
                    let da = (0..n).flat_map(|i| g[i * (ca + cb)..i * (ca + cb) + ca].iter().copied());
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let db = (0..n)
                        .flat_map(|i| g[i * (ca + cb) + ca..(i + 1) * (ca + cb)].iter().copied());
                    accumulate(grads, *b, db);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.iter().copied()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0] / va.len() as f64;
                if wants(*a) {
                    accumulate(grads, *a, va.iter().zip(vb).map(|(x, y)| k * (x - y)));
                }
                if wants(*b) {
                    accumulate(grads, *b, va.iter().zip(vb).map(|(x, y)| -k * (x - y)));
                }
            }
            Op::SelectRows { table, rows } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (i, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        dt[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, labels } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut dl = Vec::with_capacity(self.value(*logits).len());
                for (row, &l) in self.value(*logits).data().chunks(k).zip(labels) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - m).exp() / z;
                        dl.push(scale * (p - if j == l { 1.0 } else { 0.0 }));
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn op_name(op: Elementwise) -> &'static str {
    match op {
        Elementwise::Add => "add",
        Elementwise::Sub => "sub",
        Elementwise::Mul => "mul",
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl IntoIterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contrib.into_iter().collect()),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
        assert!(g.mse(a, b).is_err());
    }

    #[test]
    fn mul_by_zero_annihilates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let y = g.scale(x, 0.0);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn scale_by_one_is_bit_identical() {
        let mut g = Graph::new();
        let data = [0.1, -1e-300, 3.5e200];
        let x = g.leaf(t(&[3], &data));
        let y = g.scale(x, 1.0);
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 3], 0.7));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let b = g.constant(t(&[2], &[2.0, 2.0]));
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 4.0);
        let m2 = g.mse(a, a).unwrap();
        assert_eq!(g.value(m2).item(), 0.0);
    }

    #[test]
    fn mse_gradient_matches_formula() {
        let a_data = [0.3, -1.2, 2.0, 0.5];
        let b_data = [1.0, 0.2, -0.4, 0.5];
        let mut g = Graph::new();
        let a = g.leaf(t(&[4], &a_data));
        let b = g.constant(t(&[4], &b_data));
        let m = g.mse(a, b).unwrap();
        let grads = g.backward(m).unwrap();
        for (i, gv) in grads.get(a).unwrap().data().iter().enumerate() {
            let expect = 2.0 * (a_data[i] - b_data[i]) / 4.0;
            assert!((gv - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let k = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sqrt()).collect();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 5], data.clone()).unwrap());
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 7, 6]));
        let k = g.constant(Tensor::zeros(vec![4, 3, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 3]);
        let big = g.constant(Tensor::zeros(vec![1, 3, 10, 10]));
        assert!(g.conv2d(x, big, 1, 1).is_err());
        let wrong_c = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(g.conv2d(x, wrong_c, 1, 1).is_err());
        assert!(g.conv2d(x, k, 0, 1).is_err());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2], 1.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2], 1.0));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn each_node_visited_once() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![3], 0.5));
        // diamond: x feeds two branches that rejoin
        let a = g.silu(x);
        let b = g.scale(x, 3.0);
        let c = g.mul(a, b).unwrap();
        let d = g.add(c, a).unwrap();
        let s = g.mean(d);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), g.len());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2], 1.0));
        let c = g.constant(Tensor::full(vec![2], 2.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn select_rows_zero_for_none() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = g.select_rows(table, &[Some(1), None, Some(1)]).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
        assert!(g.select_rows(table, &[Some(2)]).is_err());
    }
}
