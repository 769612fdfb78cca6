//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! The tape is define-by-run: every forward pass records the operations it
//! actually executes, which is what lets gradients flow through recursive
//! prediction rollouts of arbitrary, data-dependent length. An op records
//! a node only when gradient can flow out of one of its inputs; otherwise
//! it is computed eagerly and returns a plain tensor, so inference runs
//! through the same code with zero recording.
//!
//! Node inputs always reference earlier tape positions, so one reverse
//! sweep visits each node exactly once. A parameter used at every step of
//! an unrolled rollout accumulates one gradient contribution per use.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Elementwise nonlinearities available to the architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output value.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArg(format!(
                "unknown activation '{other}' (expected tanh|sigmoid|relu|identity)"
            ))),
        }
    }
}

/// Input of a recorded op: an earlier node, or an inline constant that no
/// gradient flows into.
#[derive(Debug, Clone)]
enum Src {
    Node(usize),
    Const { shape: Vec<usize>, values: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Src, b: Src },
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    Mul { a: Src, b: Src },
    Scale { x: Src, c: f64 },
    AddRow { x: Src, bias: Src },
    Activation { x: Src, kind: Activation },
    CausalConv { x: Src, kernel: Src, dilation: usize },
    /// Mask entries are 0 or 1/(1-p); forward already applied it.
    Dropout { x: Src, mask: Vec<f64> },
    Sum { x: Src },
    Mean { x: Src },
    ConcatCols { parts: Vec<Src> },
    ConcatRows { parts: Vec<Src> },
    SliceCols { x: Src, start: usize },
    SliceRows { x: Src, start: usize },
    Transpose { x: Src },
    AddCol { x: Src, bias: Src },
    Reshape { x: Src },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
}

/// Gradient tape for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, keyed by tape node.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, or None if no gradient reached it
    /// (unbound tensor, different tape, or dead branch).
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let (tape, idx) = t.node()?;
        if tape != self.tape_id {
            return None;
        }
        self.grads[idx].as_deref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bind a tensor to this tape as a leaf. Gradient is produced for it
    /// iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            needs_grad: t.requires_grad(),
        });
        Tensor::computed(t.shape().to_vec(), t.values().to_vec(), Some((self.id, idx)))
    }

    fn src_of(&self, t: &Tensor) -> Result<(Src, bool)> {
        match t.node() {
            Some((tape, idx)) => {
                if tape != self.id {
                    return Err(Error::InvalidArg(
                        "tensor belongs to a different tape; tapes are per forward pass".into(),
                    ));
                }
                Ok((Src::Node(idx), self.nodes[idx].needs_grad))
            }
            None => Ok((
                Src::Const { shape: t.shape().to_vec(), values: t.values().to_vec() },
                false,
            )),
        }
    }

    fn src_shape<'a>(&'a self, s: &'a Src) -> &'a [usize] {
        match s {
            Src::Node(i) => &self.nodes[*i].shape,
            Src::Const { shape, .. } => shape,
        }
    }

    fn src_values<'a>(&'a self, s: &'a Src) -> &'a [f64] {
        match s {
            Src::Node(i) => &self.nodes[*i].values,
            Src::Const { values, .. } => values,
        }
    }

    /// Record `op` if gradient can flow out of it, otherwise return the
    /// computed tensor unbound.
    fn finish(&mut self, op: Op, needs: bool, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        if !needs {
            return Tensor::computed(shape, values, None);
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { op, shape: shape.clone(), values: values.clone(), needs_grad: true });
        Tensor::computed(shape, values, Some((self.id, idx)))
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(a, "matmul")?;
        let (k2, n) = as_matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let values = raw::matmul(a.values(), b.values(), m, k, n);
        let (sa, na) = self.src_of(a)?;
        let (sb, nb) = self.src_of(b)?;
        Ok(self.finish(Op::Matmul { a: sa, b: sb }, na || nb, vec![m, n], values))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("add", a, b, |x, y| x + y, |sa, sb| Op::Add { a: sa, b: sb })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("sub", a, b, |x, y| x - y, |sa, sb| Op::Sub { a: sa, b: sb })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("mul", a, b, |x, y| x * y, |sa, sb| Op::Mul { a: sa, b: sb })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        build: impl FnOnce(Src, Src) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let values: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let (sa, na) = self.src_of(a)?;
        let (sb, nb) = self.src_of(b)?;
        Ok(self.finish(build(sa, sb), na || nb, a.shape().to_vec(), values))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let values: Vec<f64> = x.values().iter().map(|v| v * c).collect();
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::Scale { x: sx, c }, nx, x.shape().to_vec(), values))
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_row(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "add_row")?;
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: x.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let bv = bias.values();
        let mut values = x.values().to_vec();
        for r in 0..m {
            for c in 0..n {
                values[r * n + c] += bv[c];
            }
        }
        let (sx, nx) = self.src_of(x)?;
        let (sb, nb) = self.src_of(bias)?;
        Ok(self.finish(Op::AddRow { x: sx, bias: sb }, nx || nb, vec![m, n], values))
    }

    /// Add a rank-1 bias to every column of a rank-2 tensor (bias per row).
    pub fn add_col(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "add_col")?;
        if bias.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_col",
                left: x.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let bv = bias.values();
        let mut values = x.values().to_vec();
        for r in 0..m {
            for c in 0..n {
                values[r * n + c] += bv[r];
            }
        }
        let (sx, nx) = self.src_of(x)?;
        let (sb, nb) = self.src_of(bias)?;
        Ok(self.finish(Op::AddCol { x: sx, bias: sb }, nx || nb, vec![m, n], values))
    }

    /// Reinterpret the value buffer under a new shape (row-major order kept).
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: x.shape().to_vec(),
                right: shape,
            });
        }
        let (sx, nx) = self.src_of(x)?;
        let values = x.values().to_vec();
        Ok(self.finish(Op::Reshape { x: sx }, nx, shape, values))
    }

    /// Elementwise nonlinearity.
    pub fn activation(&mut self, x: &Tensor, kind: Activation) -> Result<Tensor> {
        let values: Vec<f64> = x.values().iter().map(|v| kind.apply(*v)).collect();
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::Activation { x: sx, kind }, nx, x.shape().to_vec(), values))
    }

    /// Dilated causal 1-D convolution. `x` is [channels, time], `kernel`
    /// is [out, in, width]; the input is zero-padded on the left by
    /// (width-1)*dilation so output t depends only on inputs at times <= t.
    pub fn causal_conv1d(&mut self, x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
        if dilation < 1 {
            return Err(Error::InvalidArg("conv dilation must be >= 1".into()));
        }
        if x.shape().len() != 2 || kernel.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d",
                left: x.shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        let (ci, t) = (x.shape()[0], x.shape()[1]);
        let (co, ck, w) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        if ck != ci {
            return Err(Error::ShapeMismatch {
                op: "causal_conv1d input channels",
                left: x.shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        if w < 1 {
            return Err(Error::InvalidArg("conv kernel width must be >= 1".into()));
        }
        let values = raw::causal_conv(x.values(), kernel.values(), ci, t, co, w, dilation);
        let (sx, nx) = self.src_of(x)?;
        let (sk, nk) = self.src_of(kernel)?;
        Ok(self.finish(
            Op::CausalConv { x: sx, kernel: sk, dilation },
            nx || nk,
            vec![co, t],
            values,
        ))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `p` and scale survivors by 1/(1-p); in inference, identity.
    pub fn dropout(
        &mut self,
        x: &Tensor,
        p: f64,
        training: bool,
        rng: &SeedStream,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArg(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            // Identity; gradient passes through untouched, so recording a
            // unit-mask node would only bloat the tape.
            let (sx, nx) = self.src_of(x)?;
            let values = x.values().to_vec();
            return Ok(self.finish(Op::Scale { x: sx, c: 1.0 }, nx, x.shape().to_vec(), values));
        }
        let keep = 1.0 - p;
        let mut r = rng.rng();
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if r.random::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let values: Vec<f64> = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::Dropout { x: sx, mask }, nx, x.shape().to_vec(), values))
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.values().iter().sum();
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::Sum { x: sx }, nx, vec![], vec![total]))
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(Error::InvalidArg("mean of an empty tensor".into()));
        }
        let total: f64 = x.values().iter().sum();
        let (sx, nx) = self.src_of(x)?;
        let n = x.numel() as f64;
        Ok(self.finish(Op::Mean { x: sx }, nx, vec![], vec![total / n]))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols of nothing".into()));
        }
        let m = as_matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mp, np) = as_matrix(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut values = vec![0.0; m * n];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            for r in 0..m {
                values[r * n + off..r * n + off + w].copy_from_slice(&p.values()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut srcs = Vec::with_capacity(parts.len());
        let mut needs = false;
        for p in parts {
            let (s, ng) = self.src_of(p)?;
            needs |= ng;
            srcs.push(s);
        }
        Ok(self.finish(Op::ConcatCols { parts: srcs }, needs, vec![m, n], values))
    }

    /// Stack rank-2 tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_rows of nothing".into()));
        }
        let n = as_matrix(parts[0], "concat_rows")?.1;
        let mut values = Vec::new();
        let mut m = 0;
        for p in parts {
            let (mp, np) = as_matrix(p, "concat_rows")?;
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            values.extend_from_slice(p.values());
            m += mp;
        }
        let mut srcs = Vec::with_capacity(parts.len());
        let mut needs = false;
        for p in parts {
            let (s, ng) = self.src_of(p)?;
            needs |= ng;
            srcs.push(s);
        }
        Ok(self.finish(Op::ConcatRows { parts: srcs }, needs, vec![m, n], values))
    }

    pub fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice_cols [{start}, {}) out of 0..{n}",
                start + len
            )));
        }
        let mut values = Vec::with_capacity(m * len);
        for r in 0..m {
            values.extend_from_slice(&x.values()[r * n + start..r * n + start + len]);
        }
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::SliceCols { x: sx, start }, nx, vec![m, len], values))
    }

    pub fn slice_rows(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice_rows [{start}, {}) out of 0..{m}",
                start + len
            )));
        }
        let values = x.values()[start * n..(start + len) * n].to_vec();
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::SliceRows { x: sx, start }, nx, vec![len, n], values))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = as_matrix(x, "transpose")?;
        let xv = x.values();
        let mut values = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                values[c * m + r] = xv[r * n + c];
            }
        }
        let (sx, nx) = self.src_of(x)?;
        Ok(self.finish(Op::Transpose { x: sx }, nx, vec![n, m], values))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each parameter leaf receives the
    /// sum of the contributions of every path from it to the loss.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::NotScalar { op: "backward", shape: loss.shape().to_vec() });
        }
        let Some((tape, start)) = loss.node() else {
            return Err(Error::DetachedLoss);
        };
        if tape != self.id {
            return Err(Error::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[start] = Some(vec![1.0]);

        for idx in (0..=start).rev() {
            let Some(dc) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.src_shape(a)[0], self.src_shape(a)[1]);
                    let n = self.src_shape(b)[1];
                    if self.needs(a) {
                        let bv = self.src_values(b);
                        let da = self.slot(&mut grads, a);
                        // dA = dC * B^T
                        for i in 0..m {
                            for j in 0..k {
                                let mut s = 0.0;
                                for l in 0..n {
                                    s += dc[i * n + l] * bv[j * n + l];
                                }
                                da[i * k + j] += s;
                            }
                        }
                    }
                    if self.needs(b) {
                        let av = self.src_values(a);
                        let db = self.slot(&mut grads, b);
                        // dB = A^T * dC
                        for j in 0..k {
                            for l in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av[i * k + j] * dc[i * n + l];
                                }
                                db[j * n + l] += s;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        add_assign(self.slot(&mut grads, a), &dc, 1.0);
                    }
                    if self.needs(b) {
                        add_assign(self.slot(&mut grads, b), &dc, 1.0);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(a) {
                        add_assign(self.slot(&mut grads, a), &dc, 1.0);
                    }
                    if self.needs(b) {
                        add_assign(self.slot(&mut grads, b), &dc, -1.0);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let bv = self.src_values(b).to_vec();
                        let da = self.slot(&mut grads, a);
                        for i in 0..dc.len() {
                            da[i] += dc[i] * bv[i];
                        }
                    }
                    if self.needs(b) {
                        let av = self.src_values(a).to_vec();
                        let db = self.slot(&mut grads, b);
                        for i in 0..dc.len() {
                            db[i] += dc[i] * av[i];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.needs(x) {
                        add_assign(self.slot(&mut grads, x), &dc, *c);
                    }
                }
                Op::AddRow { x, bias } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    if self.needs(x) {
                        add_assign(self.slot(&mut grads, x), &dc, 1.0);
                    }
                    if self.needs(bias) {
                        let db = self.slot(&mut grads, bias);
                        for r in 0..m {
                            for c in 0..n {
                                db[c] += dc[r * n + c];
                            }
                        }
                    }
                }
                Op::Activation { x, kind } => {
                    if self.needs(x) {
                        let y = &node.values;
                        let k = *kind;
                        let dx = self.slot(&mut grads, x);
                        for i in 0..dc.len() {
                            dx[i] += dc[i] * k.grad_from_output(y[i]);
                        }
                    }
                }
                Op::CausalConv { x, kernel, dilation } => {
                    let xs = self.src_shape(x);
                    let ks = self.src_shape(kernel);
                    let (ci, t) = (xs[0], xs[1]);
                    let (co, w) = (ks[0], ks[2]);
                    let d = *dilation;
                    if self.needs(x) {
                        let kv = self.src_values(kernel).to_vec();
                        let dx = self.slot(&mut grads, x);
                        for o in 0..co {
                            for c in 0..ci {
                                for j in 0..w {
                                    let kval = kv[o * ci * w + c * w + j];
                                    if kval == 0.0 {
                                        continue;
                                    }
                                    let lag = (w - 1 - j) * d;
                                    for ti in lag..t {
                                        dx[c * t + (ti - lag)] += kval * dc[o * t + ti];
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(kernel) {
                        let xv = self.src_values(x).to_vec();
                        let dk = self.slot(&mut grads, kernel);
                        for o in 0..co {
                            for c in 0..ci {
                                for j in 0..w {
                                    let lag = (w - 1 - j) * d;
                                    let mut s = 0.0;
                                    for ti in lag..t {
                                        s += dc[o * t + ti] * xv[c * t + (ti - lag)];
                                    }
                                    dk[o * ci * w + c * w + j] += s;
                                }
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.needs(x) {
                        let dx = self.slot(&mut grads, x);
                        for i in 0..dc.len() {
                            dx[i] += dc[i] * mask[i];
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.needs(x) {
                        let dx = self.slot(&mut grads, x);
                        for v in dx.iter_mut() {
                            *v += dc[0];
                        }
                    }
                }
                Op::Mean { x } => {
                    if self.needs(x) {
                        let dx = self.slot(&mut grads, x);
                        let scale = dc[0] / dx.len() as f64;
                        for v in dx.iter_mut() {
                            *v += scale;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let m = node.shape[0];
                    let n = node.shape[1];
                    let mut off = 0;
                    for p in parts {
                        let wp = self.src_shape(p)[1];
                        if self.needs(p) {
                            let dp = self.slot(&mut grads, p);
                            for r in 0..m {
                                for c in 0..wp {
                                    dp[r * wp + c] += dc[r * n + off + c];
                                }
                            }
                        }
                        off += wp;
                    }
                }
                Op::ConcatRows { parts } => {
                    let n = node.shape[1];
                    let mut off = 0;
                    for p in parts {
                        let mp = self.src_shape(p)[0];
                        if self.needs(p) {
                            let dp = self.slot(&mut grads, p);
                            add_assign(dp, &dc[off * n..(off + mp) * n], 1.0);
                        }
                        off += mp;
                    }
                }
                Op::SliceCols { x, start } => {
                    let len = node.shape[1];
                    let m = node.shape[0];
                    if self.needs(x) {
                        let n = self.src_shape(x)[1];
                        let dx = self.slot(&mut grads, x);
                        for r in 0..m {
                            for c in 0..len {
                                dx[r * n + start + c] += dc[r * len + c];
                            }
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let len = node.shape[0];
                    let n = node.shape[1];
                    if self.needs(x) {
                        let dx = self.slot(&mut grads, x);
                        add_assign(&mut dx[start * n..(start + len) * n], &dc, 1.0);
                    }
                }
                Op::Transpose { x } => {
                    // node is [n, m], source is [m, n]
                    let (n, m) = (node.shape[0], node.shape[1]);
                    if self.needs(x) {
                        let dx = self.slot(&mut grads, x);
                        for r in 0..n {
                            for c in 0..m {
                                dx[c * n + r] += dc[r * m + c];
                            }
                        }
                    }
                }
                Op::AddCol { x, bias } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    if self.needs(x) {
                        add_assign(self.slot(&mut grads, x), &dc, 1.0);
                    }
                    if self.needs(bias) {
                        let db = self.slot(&mut grads, bias);
                        for r in 0..m {
                            for c in 0..n {
                                db[r] += dc[r * n + c];
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.needs(x) {
                        add_assign(self.slot(&mut grads, x), &dc, 1.0);
                    }
                }
            }
        }

        Ok(Gradients { tape_id: self.id, grads })
    }

    fn needs(&self, s: &Src) -> bool {
        match s {
            Src::Node(i) => self.nodes[*i].needs_grad,
            Src::Const { .. } => false,
        }
    }

    /// Gradient buffer of a node source, zero-initialized on first touch.
    /// Only called after `needs` returned true.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], s: &Src) -> &'g mut Vec<f64> {
        let Src::Node(i) = s else {
            unreachable!("slot() requested for a constant source")
        };
        grads[*i].get_or_insert_with(|| vec![0.0; self.nodes[*i].values.len()])
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        }),
    }
}

fn add_assign(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

mod raw {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..k {
                let av = a[i * k + j];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[j * n..(j + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for l in 0..n {
                    orow[l] += av * brow[l];
                }
            }
        }
        out
    }

    pub fn causal_conv(
        x: &[f64],
        k: &[f64],
        ci: usize,
        t: usize,
        co: usize,
        w: usize,
        dilation: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; co * t];
        for o in 0..co {
            for c in 0..ci {
                for j in 0..w {
                    let kval = k[o * ci * w + c * w + j];
                    if kval == 0.0 {
                        continue;
                    }
                    // tap j reaches back (w-1-j)*dilation steps; left padding is zero
                    let lag = (w - 1 - j) * dilation;
                    for ti in lag..t {
                        out[o * t + ti] += kval * x[c * t + (ti - lag)];
                    }
                }
            }
        }
        out
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
/// This is the independent oracle the tape's backward sweep is checked
/// against; it never touches a tape.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("eps must be > 0, got {eps}")));
    }
    let base = x.values().to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(shape.clone(), plus)?)?;
        let fm = f(&Tensor::from_vec(shape.clone(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::from_vec(shape, grad)
}
