//! Flat-storage tensors and a replayable gradient tape.
//!
//! Every value is an `f64` buffer in row-major order. Ops are methods on
//! [`Tape`]; each call records one node so [`Tape::backward`] can replay the
//! graph in reverse. Tensors built outside a tape (or returned by
//! [`Tensor::detach`]) act as constants: the backward pass propagates exactly
//! zero through them. A tape is single-threaded; independent tapes may run
//! concurrently on independent data.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Norm guard used when dividing by vector norms.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {len} values do not fill shape {shape:?}")]
    SizeMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("backward target has {elements} elements, expected a scalar")]
    NotScalar { elements: usize },
    #[error("backward target is a constant with no tape node")]
    ConstantTarget,
    #[error("{op}: input belongs to a different tape")]
    ForeignTape { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// Dense row-major tensor. Cloning shares the value buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TensorError::SizeMismatch {
                op: "Tensor::new",
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the buffer; unshares it if other clones exist.
    /// Only meaningful for tensors living outside a tape (parameters).
    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values)
    }

    /// The single value of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    /// Stop-gradient: same values (bit-identical, shared buffer), but the
    /// result is a constant, so backward propagates zero through it.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            node: None,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    fn node_on(&self, tape_id: u64, op: &'static str) -> Result<Option<usize>> {
        match self.node {
            None => Ok(None),
            Some(r) if r.tape == tape_id => Ok(Some(r.index)),
            Some(_) => Err(TensorError::ForeignTape { op }),
        }
    }
}

/// Forward identity, zero backward. Alias for [`Tensor::detach`].
pub fn stop_gradient(t: &Tensor) -> Tensor {
    t.detach()
}

enum Op {
    Leaf,
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Div { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f64 },
    AddScalar { a: Tensor },
    Matmul { a: Tensor, b: Tensor },
    AddBias { a: Tensor, b: Tensor },
    Relu { a: Tensor },
    Exp { a: Tensor },
    Sqrt { a: Tensor },
    Reshape { a: Tensor },
    SumAll { a: Tensor },
    MeanAll { a: Tensor },
    SumAxis { a: Tensor, axis: usize },
    MeanAxis { a: Tensor, axis: usize },
    LogSoftmax { a: Tensor },
    Conv2d { x: Tensor, w: Tensor, pad: usize },
    AvgPool2 { a: Tensor },
    GlobalAvgPool { a: Tensor },
    ChannelMean { a: Tensor },
    SubChannel { x: Tensor, c: Tensor },
    MulChannel { x: Tensor, c: Tensor },
    DivChannel { x: Tensor, c: Tensor },
    AddChannel { x: Tensor, c: Tensor },
    RowL2Norm { a: Tensor },
    DivRows { x: Tensor, r: Tensor },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    out: Arc<Vec<f64>>,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Records ops for one forward computation; replays them in reverse for
/// gradients. Multiple backward passes over the same tape are allowed.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by tape node, as produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of the backward target with respect to `t`. Tensors that are
    /// constants, live on another tape, or were never reached get zeros of
    /// their own shape.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match t.node {
            Some(r) if r.tape == self.tape => match self.grads.get(&r.index) {
                Some(g) => g.clone(),
                None => Tensor::zeros(&t.shape),
            },
            _ => Tensor::zeros(&t.shape),
        }
    }

    /// True if backward actually reached `t` with a nonzero-shaped buffer.
    pub fn reached(&self, t: &Tensor) -> bool {
        matches!(t.node, Some(r) if r.tape == self.tape && self.grads.contains_key(&r.index))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let out = Arc::new(values);
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            out: out.clone(),
        });
        Tensor {
            shape,
            values: out,
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    /// Registers `t`'s values as a differentiable leaf of this tape.
    /// The buffer is shared; later `values_mut` on `t` unshares it, so the
    /// tape keeps seeing the values from registration time.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let out = t.values.clone();
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            out: out.clone(),
        });
        Tensor {
            shape: t.shape.clone(),
            values: out,
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    fn check(&self, t: &Tensor, op: &'static str) -> Result<()> {
        t.node_on(self.id, op).map(|_| ())
    }

    fn same_shape(&self, op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        self.check(a, op)?;
        self.check(b, op)?;
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = a.values.iter().zip(b.values.iter()).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add { a: a.clone(), b: b.clone() }, a.shape.clone(), v))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = a.values.iter().zip(b.values.iter()).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub { a: a.clone(), b: b.clone() }, a.shape.clone(), v))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = a.values.iter().zip(b.values.iter()).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul { a: a.clone(), b: b.clone() }, a.shape.clone(), v))
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape("div", a, b)?;
        let v = a.values.iter().zip(b.values.iter()).map(|(x, y)| x / y).collect();
        Ok(self.push(Op::Div { a: a.clone(), b: b.clone() }, a.shape.clone(), v))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check(a, "scale")?;
        let v = a.values.iter().map(|x| c * x).collect();
        Ok(self.push(Op::Scale { a: a.clone(), c }, a.shape.clone(), v))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check(a, "add_scalar")?;
        let v = a.values.iter().map(|x| x + c).collect();
        Ok(self.push(Op::AddScalar { a: a.clone() }, a.shape.clone(), v))
    }

    /// 2-D matrix product: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        if a.shape.len() != 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: 2, shape: a.shape.clone() });
        }
        if b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let v = matmul_raw(&a.values, &b.values, m, k, n);
        Ok(self.push(Op::Matmul { a: a.clone(), b: b.clone() }, vec![m, n], v))
    }

    /// Adds a length-`n` bias row to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check(a, "add_bias")?;
        self.check(b, "add_bias")?;
        if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let n = b.len();
        let v = a
            .values
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b.values.iter()).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Op::AddBias { a: a.clone(), b: b.clone() }, a.shape.clone(), v))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "relu")?;
        let v = a.values.iter().map(|x| x.max(0.0)).collect();
        Ok(self.push(Op::Relu { a: a.clone() }, a.shape.clone(), v))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "exp")?;
        let v = a.values.iter().map(|x| x.exp()).collect();
        Ok(self.push(Op::Exp { a: a.clone() }, a.shape.clone(), v))
    }

    /// Elementwise square root. Inputs must be strictly positive so the
    /// derivative stays finite; guard upstream with `add_scalar`.
    pub fn sqrt(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "sqrt")?;
        let v = a.values.iter().map(|x| x.sqrt()).collect();
        Ok(self.push(Op::Sqrt { a: a.clone() }, a.shape.clone(), v))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check(a, "reshape")?;
        let n: usize = shape.iter().product();
        if n != a.len() {
            return Err(TensorError::SizeMismatch {
                op: "reshape",
                len: a.len(),
                shape: shape.to_vec(),
            });
        }
        let v = a.values.to_vec();
        Ok(self.push(Op::Reshape { a: a.clone() }, shape.to_vec(), v))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "sum_all")?;
        let s: f64 = a.values.iter().sum();
        Ok(self.push(Op::SumAll { a: a.clone() }, vec![], vec![s]))
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "mean_all")?;
        if a.is_empty() {
            return Err(TensorError::Invalid { op: "mean_all", msg: "empty tensor".into() });
        }
        let s: f64 = a.values.iter().sum();
        let m = s / a.len() as f64;
        Ok(self.push(Op::MeanAll { a: a.clone() }, vec![], vec![m]))
    }

    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.axis_reduce(a, axis, "sum_axis", false)
    }

    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.axis_reduce(a, axis, "mean_axis", true)
    }

    fn axis_reduce(&mut self, a: &Tensor, axis: usize, op: &'static str, mean: bool) -> Result<Tensor> {
        self.check(a, op)?;
        if axis >= a.shape.len() {
            return Err(TensorError::BadAxis { op, axis, shape: a.shape.clone() });
        }
        let (outer, mid, inner) = split_axis(&a.shape, axis);
        if mid == 0 {
            return Err(TensorError::Invalid { op, msg: "reduction over empty axis".into() });
        }
        let mut v = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let dst = &mut v[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&a.values[base..base + inner]) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = 1.0 / mid as f64;
            for x in &mut v {
                *x *= inv;
            }
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        let node = if mean {
            Op::MeanAxis { a: a.clone(), axis }
        } else {
            Op::SumAxis { a: a.clone(), axis }
        };
        Ok(self.push(node, shape, v))
    }

    /// Row-wise log-softmax of an `[n,k]` matrix, computed through the
    /// shifted log-sum-exp so large logits cannot overflow.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "log_softmax")?;
        if a.shape.len() != 2 {
            return Err(TensorError::BadRank { op: "log_softmax", expected: 2, shape: a.shape.clone() });
        }
        let k = a.shape[1];
        let mut v = Vec::with_capacity(a.len());
        for row in a.values.chunks_exact(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            v.extend(row.iter().map(|x| x - lse));
        }
        Ok(self.push(Op::LogSoftmax { a: a.clone() }, a.shape.clone(), v))
    }

    /// 2-D cross-correlation, stride 1, symmetric zero padding `pad`.
    /// `x` is `[n,ci,h,w]`, `w` is `[co,ci,kh,kw]`.
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
        self.check(x, "conv2d")?;
        self.check(w, "conv2d")?;
        if x.shape.len() != 4 {
            return Err(TensorError::BadRank { op: "conv2d", expected: 4, shape: x.shape.clone() });
        }
        if w.shape.len() != 4 || w.shape[1] != x.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
        if h + 2 * pad + 1 <= kh || wd + 2 * pad + 1 <= kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            });
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        conv2d_forward(&x.values, &w.values, &mut out, n, ci, h, wd, co, kh, kw, pad);
        Ok(self.push(Op::Conv2d { x: x.clone(), w: w.clone(), pad }, vec![n, co, oh, ow], out))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "avg_pool2")?;
        if a.shape.len() != 4 {
            return Err(TensorError::BadRank { op: "avg_pool2", expected: 4, shape: a.shape.clone() });
        }
        let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("odd spatial dims {}x{}", h, w),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &a.values[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let t = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = t * 0.25;
                }
            }
        }
        Ok(self.push(Op::AvgPool2 { a: a.clone() }, vec![n, c, oh, ow], out))
    }

    /// Spatial mean: `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "global_avg_pool")?;
        if a.shape.len() != 4 {
            return Err(TensorError::BadRank { op: "global_avg_pool", expected: 4, shape: a.shape.clone() });
        }
        let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        let hw = h * w;
        if hw == 0 {
            return Err(TensorError::Invalid { op: "global_avg_pool", msg: "empty spatial dims".into() });
        }
        let inv = 1.0 / hw as f64;
        let mut out = vec![0.0; n * c];
        for p in 0..n * c {
            out[p] = a.values[p * hw..(p + 1) * hw].iter().sum::<f64>() * inv;
        }
        Ok(self.push(Op::GlobalAvgPool { a: a.clone() }, vec![n, c], out))
    }

    /// Per-channel mean over batch and space: `[n,c,h,w] -> [c]`.
    pub fn channel_mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "channel_mean")?;
        if a.shape.len() != 4 {
            return Err(TensorError::BadRank { op: "channel_mean", expected: 4, shape: a.shape.clone() });
        }
        let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        let count = n * h * w;
        if count == 0 {
            return Err(TensorError::Invalid { op: "channel_mean", msg: "empty batch".into() });
        }
        let hw = h * w;
        let mut out = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                out[ch] += a.values[base..base + hw].iter().sum::<f64>();
            }
        }
        let inv = 1.0 / count as f64;
        for x in &mut out {
            *x *= inv;
        }
        Ok(self.push(Op::ChannelMean { a: a.clone() }, vec![c], out))
    }

    pub fn sub_channel(&mut self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let v = self.channel_zip("sub_channel", x, c, |a, b| a - b)?;
        Ok(self.push(Op::SubChannel { x: x.clone(), c: c.clone() }, x.shape.clone(), v))
    }

    pub fn mul_channel(&mut self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let v = self.channel_zip("mul_channel", x, c, |a, b| a * b)?;
        Ok(self.push(Op::MulChannel { x: x.clone(), c: c.clone() }, x.shape.clone(), v))
    }

    pub fn div_channel(&mut self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let v = self.channel_zip("div_channel", x, c, |a, b| a / b)?;
        Ok(self.push(Op::DivChannel { x: x.clone(), c: c.clone() }, x.shape.clone(), v))
    }

    pub fn add_channel(&mut self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let v = self.channel_zip("add_channel", x, c, |a, b| a + b)?;
        Ok(self.push(Op::AddChannel { x: x.clone(), c: c.clone() }, x.shape.clone(), v))
    }

    fn channel_zip(
        &mut self,
        op: &'static str,
        x: &Tensor,
        c: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        self.check(x, op)?;
        self.check(c, op)?;
        if x.shape.len() != 4 || c.shape.len() != 1 || c.shape[0] != x.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape.clone(),
                rhs: c.shape.clone(),
            });
        }
        let (n, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let hw = h * w;
        let mut v = Vec::with_capacity(x.len());
        for b in 0..n {
            for cc in 0..ch {
                let s = c.values[cc];
                let base = (b * ch + cc) * hw;
                v.extend(x.values[base..base + hw].iter().map(|a| f(*a, s)));
            }
        }
        Ok(v)
    }

    /// Per-row Euclidean norm of an `[n,d]` matrix -> `[n]`. The backward
    /// rule guards zero rows with [`NORM_EPS`].
    pub fn row_l2_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check(a, "row_l2_norm")?;
        if a.shape.len() != 2 {
            return Err(TensorError::BadRank { op: "row_l2_norm", expected: 2, shape: a.shape.clone() });
        }
        let d = a.shape[1];
        let v: Vec<f64> = a
            .values
            .chunks_exact(d)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(Op::RowL2Norm { a: a.clone() }, vec![a.shape[0]], v))
    }

    /// Divides each row of `[n,d]` by the matching entry of `[n]`.
    pub fn div_rows(&mut self, x: &Tensor, r: &Tensor) -> Result<Tensor> {
        self.check(x, "div_rows")?;
        self.check(r, "div_rows")?;
        if x.shape.len() != 2 || r.shape.len() != 1 || r.shape[0] != x.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "div_rows",
                lhs: x.shape.clone(),
                rhs: r.shape.clone(),
            });
        }
        let d = x.shape[1];
        let mut v = Vec::with_capacity(x.len());
        for (i, row) in x.values.chunks_exact(d).enumerate() {
            let inv = 1.0 / r.values[i];
            v.extend(row.iter().map(|a| a * inv));
        }
        Ok(self.push(Op::DivRows { x: x.clone(), r: r.clone() }, x.shape.clone(), v))
    }

    /// Reverse pass from a scalar `loss` node. Returns one gradient per
    /// reached node; constants and unreached leaves read back as zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let idx = match loss.node {
            Some(r) if r.tape == self.id => r.index,
            Some(_) => return Err(TensorError::ForeignTape { op: "backward" }),
            None => return Err(TensorError::ConstantTarget),
        };
        if loss.len() != 1 {
            return Err(TensorError::NotScalar { elements: loss.len() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[idx] = Some(vec![1.0]);
        for i in (0..=idx).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.pull(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut map = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                map.insert(
                    i,
                    Tensor {
                        shape: self.nodes[i].shape.clone(),
                        values: Arc::new(g),
                        node: None,
                    },
                );
            }
        }
        Ok(Gradients { tape: self.id, grads: map })
    }

    /// Routes `g`, the gradient at node `i`, into the node's inputs.
    fn pull(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        // Accumulates `make(buf)` into the input's gradient slot, skipping
        // constants: that skip is what makes detach a hard gradient wall.
        macro_rules! into {
            ($t:expr, $make:expr) => {
                if let Some(NodeRef { index, .. }) = $t.node {
                    let slot = grads[index].get_or_insert_with(|| vec![0.0; $t.len()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($make)(slot.as_mut_slice());
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                into!(a, |s: &mut [f64]| axpy(s, g, 1.0));
                into!(b, |s: &mut [f64]| axpy(s, g, 1.0));
            }
            Op::Sub { a, b } => {
                into!(a, |s: &mut [f64]| axpy(s, g, 1.0));
                into!(b, |s: &mut [f64]| axpy(s, g, -1.0));
            }
            Op::Mul { a, b } => {
                into!(a, |s: &mut [f64]| for ((d, gi), bi) in
                    s.iter_mut().zip(g).zip(b.values.iter())
                {
                    *d += gi * bi;
                });
                into!(b, |s: &mut [f64]| for ((d, gi), ai) in
                    s.iter_mut().zip(g).zip(a.values.iter())
                {
                    *d += gi * ai;
                });
            }
            Op::Div { a, b } => {
                into!(a, |s: &mut [f64]| for ((d, gi), bi) in
                    s.iter_mut().zip(g).zip(b.values.iter())
                {
                    *d += gi / bi;
                });
                into!(b, |s: &mut [f64]| for (((d, gi), ai), bi) in
                    s.iter_mut().zip(g).zip(a.values.iter()).zip(b.values.iter())
                {
                    *d -= gi * ai / (bi * bi);
                });
            }
            Op::Scale { a, c } => {
                into!(a, |s: &mut [f64]| axpy(s, g, *c));
            }
            Op::AddScalar { a } => {
                into!(a, |s: &mut [f64]| axpy(s, g, 1.0));
            }
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                into!(a, |s: &mut [f64]| {
                    // dA = g . B^T
                    for i in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for t in 0..n {
                                acc += g[i * n + t] * b.values[j * n + t];
                            }
                            s[i * k + j] += acc;
                        }
                    }
                });
                into!(b, |s: &mut [f64]| {
                    // dB = A^T . g
                    for j in 0..k {
                        for t in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += a.values[i * k + j] * g[i * n + t];
                            }
                            s[j * n + t] += acc;
                        }
                    }
                });
            }
            Op::AddBias { a, b } => {
                into!(a, |s: &mut [f64]| axpy(s, g, 1.0));
                let n = b.len();
                into!(b, |s: &mut [f64]| for row in g.chunks_exact(n) {
                    for (d, gi) in s.iter_mut().zip(row) {
                        *d += gi;
                    }
                });
            }
            Op::Relu { a } => {
                into!(a, |s: &mut [f64]| for ((d, gi), ai) in
                    s.iter_mut().zip(g).zip(a.values.iter())
                {
                    if *ai > 0.0 {
                        *d += gi;
                    }
                });
            }
            Op::Exp { a } => {
                into!(a, |s: &mut [f64]| for ((d, gi), yi) in
                    s.iter_mut().zip(g).zip(node.out.iter())
                {
                    *d += gi * yi;
                });
            }
            Op::Sqrt { a } => {
                into!(a, |s: &mut [f64]| for ((d, gi), yi) in
                    s.iter_mut().zip(g).zip(node.out.iter())
                {
                    *d += gi / (2.0 * yi);
                });
            }
            Op::Reshape { a } => {
                into!(a, |s: &mut [f64]| axpy(s, g, 1.0));
            }
            Op::SumAll { a } => {
                into!(a, |s: &mut [f64]| for d in s.iter_mut() {
                    *d += g[0];
                });
            }
            Op::MeanAll { a } => {
                let inv = 1.0 / a.len() as f64;
                into!(a, |s: &mut [f64]| for d in s.iter_mut() {
                    *d += g[0] * inv;
                });
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (outer, mid, inner) = split_axis(&a.shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis { .. } => 1.0 / mid as f64,
                    _ => 1.0,
                };
                into!(a, |s: &mut [f64]| for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for (d, gi) in s[base..base + inner].iter_mut().zip(src) {
                            *d += gi * scale;
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let k = a.shape[1];
                into!(a, |s: &mut [f64]| {
                    for (r, (grow, yrow)) in g.chunks_exact(k).zip(node.out.chunks_exact(k)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        let dst = &mut s[r * k..(r + 1) * k];
                        for ((d, gi), yi) in dst.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - yi.exp() * gsum;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, pad } => {
                let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
                into!(x, |s: &mut [f64]| conv2d_backward_data(
                    g, &w.values, s, n, ci, h, wd, co, kh, kw, *pad
                ));
                into!(w, |s: &mut [f64]| conv2d_backward_weights(
                    g, &x.values, s, n, ci, h, wd, co, kh, kw, *pad
                ));
            }
            Op::AvgPool2 { a } => {
                let (h, w) = (a.shape[2], a.shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = a.shape[0] * a.shape[1];
                into!(a, |s: &mut [f64]| for p in 0..planes {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut s[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let q = src[i * ow + j] * 0.25;
                            dst[2 * i * w + 2 * j] += q;
                            dst[2 * i * w + 2 * j + 1] += q;
                            dst[(2 * i + 1) * w + 2 * j] += q;
                            dst[(2 * i + 1) * w + 2 * j + 1] += q;
                        }
                    }
                });
            }
            Op::GlobalAvgPool { a } => {
                let hw = a.shape[2] * a.shape[3];
                let inv = 1.0 / hw as f64;
                into!(a, |s: &mut [f64]| for (p, gi) in g.iter().enumerate() {
                    for d in s[p * hw..(p + 1) * hw].iter_mut() {
                        *d += gi * inv;
                    }
                });
            }
            Op::ChannelMean { a } => {
                let (n, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
                let hw = h * w;
                let inv = 1.0 / (n * hw) as f64;
                into!(a, |s: &mut [f64]| for b in 0..n {
                    for ch in 0..c {
                        let q = g[ch] * inv;
                        let base = (b * c + ch) * hw;
                        for d in s[base..base + hw].iter_mut() {
                            *d += q;
                        }
                    }
                });
            }
            Op::SubChannel { x, c } => {
                into!(x, |s: &mut [f64]| axpy(s, g, 1.0));
                self.channel_reduce(c, x, g, grads, |_, gi| -gi);
            }
            Op::AddChannel { x, c } => {
                into!(x, |s: &mut [f64]| axpy(s, g, 1.0));
                self.channel_reduce(c, x, g, grads, |_, gi| gi);
            }
            Op::MulChannel { x, c } => {
                let (n, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let hw = h * w;
                into!(x, |s: &mut [f64]| for b in 0..n {
                    for cc in 0..ch {
                        let q = c.values[cc];
                        let base = (b * ch + cc) * hw;
                        for (d, gi) in s[base..base + hw].iter_mut().zip(&g[base..base + hw]) {
                            *d += gi * q;
                        }
                    }
                });
                self.channel_reduce(c, x, g, grads, |xi, gi| gi * xi);
            }
            Op::DivChannel { x, c } => {
                let (n, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let hw = h * w;
                into!(x, |s: &mut [f64]| for b in 0..n {
                    for cc in 0..ch {
                        let q = 1.0 / c.values[cc];
                        let base = (b * ch + cc) * hw;
                        for (d, gi) in s[base..base + hw].iter_mut().zip(&g[base..base + hw]) {
                            *d += gi * q;
                        }
                    }
                });
                into!(c, |s: &mut [f64]| for cc in 0..ch {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let base = (b * ch + cc) * hw;
                        for (gi, xi) in g[base..base + hw].iter().zip(&x.values[base..base + hw]) {
                            acc += gi * xi;
                        }
                    }
                    s[cc] -= acc / (c.values[cc] * c.values[cc]);
                });
            }
            Op::RowL2Norm { a } => {
                let d = a.shape[1];
                into!(a, |s: &mut [f64]| {
                    for (r, row) in a.values.chunks_exact(d).enumerate() {
                        let norm = node.out[r].max(NORM_EPS);
                        let q = g[r] / norm;
                        for (dst, xi) in s[r * d..(r + 1) * d].iter_mut().zip(row) {
                            *dst += q * xi;
                        }
                    }
                });
            }
            Op::DivRows { x, r } => {
                let d = x.shape[1];
                into!(x, |s: &mut [f64]| {
                    for i in 0..x.shape[0] {
                        let inv = 1.0 / r.values[i];
                        for (dst, gi) in s[i * d..(i + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *dst += gi * inv;
                        }
                    }
                });
                into!(r, |s: &mut [f64]| {
                    for i in 0..x.shape[0] {
                        let ri = r.values[i];
                        let mut acc = 0.0;
                        for (gi, xi) in g[i * d..(i + 1) * d].iter().zip(&x.values[i * d..(i + 1) * d]) {
                            acc += gi * xi;
                        }
                        s[i] -= acc / (ri * ri);
                    }
                });
            }
        }
    }

    /// Per-channel reduction of `g * f(x)` into the gradient of a `[c]` input.
    fn channel_reduce(
        &self,
        c: &Tensor,
        x: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64) -> f64,
    ) {
        if let Some(NodeRef { index, .. }) = c.node {
            let (n, ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let hw = h * w;
            let slot = grads[index].get_or_insert_with(|| vec![0.0; c.len()]);
            for b in 0..n {
                for cc in 0..ch {
                    let base = (b * ch + cc) * hw;
                    let mut acc = 0.0;
                    for (gi, xi) in g[base..base + hw].iter().zip(&x.values[base..base + hw]) {
                        acc += f(*xi, *gi);
                    }
                    slot[cc] += acc;
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Copies an `h x w` plane into an `(h+2) x (w+2)` zero-padded scratch.
fn pad1(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let pw = w + 2;
    dst.fill(0.0);
    for y in 0..h {
        dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// 3x3/pad-1 kernels dominate the run time; the padded-plane form keeps the
/// inner loop branch-free with all nine taps fused.
#[allow(clippy::too_many_arguments)]
fn conv2d_forward_3x3(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) {
    let pw = wd + 2;
    let mut plane = vec![0.0; (h + 2) * pw];
    for b in 0..n {
        let xb = &x[b * ci * h * wd..(b + 1) * ci * h * wd];
        let ob = &mut out[b * co * h * wd..(b + 1) * co * h * wd];
        for ic in 0..ci {
            pad1(&xb[ic * h * wd..(ic + 1) * h * wd], h, wd, &mut plane);
            for oc in 0..co {
                let k = &w[(oc * ci + ic) * 9..(oc * ci + ic) * 9 + 9];
                let (k0, k1, k2, k3, k4, k5, k6, k7, k8) =
                    (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
                let oplane = &mut ob[oc * h * wd..(oc + 1) * h * wd];
                for oy in 0..h {
                    let r0 = &plane[oy * pw..oy * pw + pw];
                    let r1 = &plane[(oy + 1) * pw..(oy + 1) * pw + pw];
                    let r2 = &plane[(oy + 2) * pw..(oy + 2) * pw + pw];
                    let orow = &mut oplane[oy * wd..(oy + 1) * wd];
                    for j in 0..wd {
                        orow[j] += k0 * r0[j]
                            + k1 * r0[j + 1]
                            + k2 * r0[j + 2]
                            + k3 * r1[j]
                            + k4 * r1[j + 1]
                            + k5 * r1[j + 2]
                            + k6 * r2[j]
                            + k7 * r2[j + 1]
                            + k8 * r2[j + 2];
                    }
                }
            }
        }
    }
}

/// Input gradient for the 3x3/pad-1 case: correlation of the padded output
/// gradient with the flipped kernel, channel roles swapped.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward_data_3x3(
    g: &[f64],
    w: &[f64],
    dx: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) {
    let pw = wd + 2;
    let mut plane = vec![0.0; (h + 2) * pw];
    for b in 0..n {
        let gb = &g[b * co * h * wd..(b + 1) * co * h * wd];
        let dxb = &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd];
        for oc in 0..co {
            pad1(&gb[oc * h * wd..(oc + 1) * h * wd], h, wd, &mut plane);
            for ic in 0..ci {
                let k = &w[(oc * ci + ic) * 9..(oc * ci + ic) * 9 + 9];
                let (k0, k1, k2, k3, k4, k5, k6, k7, k8) =
                    (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]);
                let dplane = &mut dxb[ic * h * wd..(ic + 1) * h * wd];
                for iy in 0..h {
                    let r0 = &plane[iy * pw..iy * pw + pw];
                    let r1 = &plane[(iy + 1) * pw..(iy + 1) * pw + pw];
                    let r2 = &plane[(iy + 2) * pw..(iy + 2) * pw + pw];
                    let drow = &mut dplane[iy * wd..(iy + 1) * wd];
                    for j in 0..wd {
                        drow[j] += k8 * r0[j]
                            + k7 * r0[j + 1]
                            + k6 * r0[j + 2]
                            + k5 * r1[j]
                            + k4 * r1[j + 1]
                            + k3 * r1[j + 2]
                            + k2 * r2[j]
                            + k1 * r2[j + 1]
                            + k0 * r2[j + 2];
                    }
                }
            }
        }
    }
}

/// Weight gradient for the 3x3/pad-1 case: nine shifted dot products per
/// `(oc, ic)` pair against the padded input plane.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weights_3x3(
    g: &[f64],
    x: &[f64],
    dw: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
) {
    let pw = wd + 2;
    let mut plane = vec![0.0; (h + 2) * pw];
    for b in 0..n {
        let gb = &g[b * co * h * wd..(b + 1) * co * h * wd];
        let xb = &x[b * ci * h * wd..(b + 1) * ci * h * wd];
        for ic in 0..ci {
            pad1(&xb[ic * h * wd..(ic + 1) * h * wd], h, wd, &mut plane);
            for oc in 0..co {
                let gplane = &gb[oc * h * wd..(oc + 1) * h * wd];
                let mut acc = [0.0f64; 9];
                for oy in 0..h {
                    let grow = &gplane[oy * wd..(oy + 1) * wd];
                    for (r, a3) in acc.chunks_exact_mut(3).enumerate() {
                        let prow = &plane[(oy + r) * pw..(oy + r + 1) * pw];
                        let mut s0 = 0.0;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for (j, gv) in grow.iter().enumerate() {
                            s0 += gv * prow[j];
                            s1 += gv * prow[j + 1];
                            s2 += gv * prow[j + 2];
                        }
                        a3[0] += s0;
                        a3[1] += s1;
                        a3[2] += s2;
                    }
                }
                let base = (oc * ci + ic) * 9;
                for (t, a) in acc.iter().enumerate() {
                    dw[base + t] += a;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    if kh == 3 && kw == 3 && pad == 1 {
        return conv2d_forward_3x3(x, w, out, n, ci, h, wd, co);
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    for b in 0..n {
        let xb = &x[b * ci * h * wd..(b + 1) * ci * h * wd];
        let ob = &mut out[b * co * oh * ow..(b + 1) * co * oh * ow];
        for oc in 0..co {
            let oplane = &mut ob[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..ci {
                let xplane = &xb[ic * h * wd..(ic + 1) * h * wd];
                let wbase = (oc * ci + ic) * kh * kw;
                for r in 0..kh {
                    let oh_lo = pad.saturating_sub(r);
                    let oh_hi = (h + pad).saturating_sub(r).min(oh);
                    for s in 0..kw {
                        let wv = w[wbase + r * kw + s];
                        let ow_lo = pad.saturating_sub(s);
                        let ow_hi = (wd + pad).saturating_sub(s).min(ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oy in oh_lo..oh_hi {
                            let iy = oy + r - pad;
                            let ix0 = ow_lo + s - pad;
                            let orow = &mut oplane[oy * ow + ow_lo..oy * ow + ow_hi];
                            let xrow = &xplane[iy * wd + ix0..iy * wd + ix0 + (ow_hi - ow_lo)];
                            for (o, xv) in orow.iter_mut().zip(xrow) {
                                *o += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_data(
    g: &[f64],
    w: &[f64],
    dx: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    if kh == 3 && kw == 3 && pad == 1 {
        return conv2d_backward_data_3x3(g, w, dx, n, ci, h, wd, co);
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    for b in 0..n {
        let gb = &g[b * co * oh * ow..(b + 1) * co * oh * ow];
        let dxb = &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd];
        for oc in 0..co {
            let gplane = &gb[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..ci {
                let dxplane = &mut dxb[ic * h * wd..(ic + 1) * h * wd];
                let wbase = (oc * ci + ic) * kh * kw;
                for r in 0..kh {
                    let oh_lo = pad.saturating_sub(r);
                    let oh_hi = (h + pad).saturating_sub(r).min(oh);
                    for s in 0..kw {
                        let wv = w[wbase + r * kw + s];
                        let ow_lo = pad.saturating_sub(s);
                        let ow_hi = (wd + pad).saturating_sub(s).min(ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oy in oh_lo..oh_hi {
                            let iy = oy + r - pad;
                            let ix0 = ow_lo + s - pad;
                            let grow = &gplane[oy * ow + ow_lo..oy * ow + ow_hi];
                            let dxrow = &mut dxplane[iy * wd + ix0..iy * wd + ix0 + (ow_hi - ow_lo)];
                            for (d, gv) in dxrow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weights(
    g: &[f64],
    x: &[f64],
    dw: &mut [f64],
    n: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    if kh == 3 && kw == 3 && pad == 1 {
        return conv2d_backward_weights_3x3(g, x, dw, n, ci, h, wd, co);
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    for b in 0..n {
        let gb = &g[b * co * oh * ow..(b + 1) * co * oh * ow];
        let xb = &x[b * ci * h * wd..(b + 1) * ci * h * wd];
        for oc in 0..co {
            let gplane = &gb[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..ci {
                let xplane = &xb[ic * h * wd..(ic + 1) * h * wd];
                let wbase = (oc * ci + ic) * kh * kw;
                for r in 0..kh {
                    let oh_lo = pad.saturating_sub(r);
                    let oh_hi = (h + pad).saturating_sub(r).min(oh);
                    for s in 0..kw {
                        let ow_lo = pad.saturating_sub(s);
                        let ow_hi = (wd + pad).saturating_sub(s).min(ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oh_lo..oh_hi {
                            let iy = oy + r - pad;
                            let ix0 = ow_lo + s - pad;
                            let grow = &gplane[oy * ow + ow_lo..oy * ow + ow_hi];
                            let xrow = &xplane[iy * wd + ix0..iy * wd + ix0 + (ow_hi - ow_lo)];
                            for (gv, xv) in grow.iter().zip(xrow) {
                                acc += gv * xv;
                            }
                        }
                        dw[wbase + r * kw + s] += acc;
                    }
                }
            }
        }
    }
}

/// Central-difference gradient check. Runs `f` once for the analytic
/// gradients, then perturbs every coordinate of every parameter by
/// `±step` and compares. Returns the maximum relative error, where the
/// denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(mut f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &leaves)?;
    if loss.len() != 1 {
        return Err(TensorError::NotScalar { elements: loss.len() });
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.wrt(l)).collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<Tensor> = ps.iter().map(|p| t.leaf(p)).collect();
        Ok(f(&mut t, &ls)?.item())
    };

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].values_mut()[j] += step;
            minus[pi].values_mut()[j] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[pi].values()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, v).expect("shape/value mismatch in test helper")
    }

    #[test]
    fn add_rejects_shape_mismatch_naming_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = tape.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "missing op name: {msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "missing shapes: {msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 2]));
        let err = tape.backward(&a).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { elements: 4 }));
    }

    #[test]
    fn backward_rejects_constant_target() {
        let tape = Tape::new();
        let err = tape.backward(&Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, TensorError::ConstantTarget));
    }

    #[test]
    fn foreign_tape_input_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(&Tensor::zeros(&[2]));
        let err = t2.relu(&a).unwrap_err();
        assert!(matches!(err, TensorError::ForeignTape { op: "relu" }));
    }

    #[test]
    fn detach_is_bitwise_identity_and_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap());
        let d = x.detach();
        assert_eq!(d.values(), x.values());
        assert!(d.is_constant());

        // y = x * detach(x): dy/dx must be detach(x) values, not 2x.
        let y = tape.mul(&x, &d).unwrap();
        let s = tape.sum_all(&y).unwrap();
        let g = tape.backward(&s).unwrap().wrt(&x);
        assert_eq!(g.values(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // s = sum(x*x + x) -> ds/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let both = tape.add(&sq, &x).unwrap();
        let s = tape.sum_all(&both).unwrap();
        let g = tape.backward(&s).unwrap().wrt(&x);
        assert_eq!(g.values(), &[7.0, -3.0]);
    }

    #[test]
    fn unreached_leaf_reads_back_zeros() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let s = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert!(!grads.reached(&y));
        assert_eq!(grads.wrt(&y).values(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(&y).shape(), &[2]);
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let mut tape = Tape::new();
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.values(), &[58.0, 64.0, 139.0, 154.0]);
    }

    /// Direct-summation convolution: four nested output loops, explicit
    /// zero padding, no slicing tricks. Reference for the production kernel.
    fn conv2d_bruteforce(x: &Tensor, w: &Tensor, pad: usize) -> Vec<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for oc in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for r in 0..kh {
                                for s in 0..kw {
                                    let iy = oy as isize + r as isize - pad as isize;
                                    let ix = ox as isize + s as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.values()
                                        [((b * ci + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.values()[((oc * ci + ic) * kh + r) * kw + s];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * co + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, ci, h, w, co, k, pad) in
            &[(2usize, 3usize, 5usize, 6usize, 4usize, 3usize, 1usize), (1, 1, 4, 4, 2, 3, 1), (2, 2, 4, 5, 3, 1, 0)]
        {
            let x = rand_tensor(&[n, ci, h, w], &mut rng);
            let wt = rand_tensor(&[co, ci, k, k], &mut rng);
            let mut tape = Tape::new();
            let y = tape.conv2d(&x, &wt, pad).unwrap();
            let want = conv2d_bruteforce(&x, &wt, pad);
            for (a, b) in y.values().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn log_softmax_rows_sum_to_one_after_exp() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 3], vec![1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0]).unwrap();
        let y = tape.log_softmax(&x).unwrap();
        for row in y.values().chunks_exact(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12, "row sums to {s}");
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn finite_difference_covers_every_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-5;
        let tol = 1e-4;

        // elementwise chain: relu, mul, div, exp, sqrt, scale, add_scalar
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        let err = finite_difference_check(
            |t, p| {
                let r = t.relu(&p[0])?;
                let m = t.mul(&r, &p[1])?;
                let e = t.exp(&m)?;
                let shifted = t.add_scalar(&p[1], 3.0)?;
                let d = t.div(&e, &shifted)?;
                let sq = t.mul(&d, &d)?;
                let guarded = t.add_scalar(&sq, 0.1)?;
                let s = t.sqrt(&guarded)?;
                let sc = t.scale(&s, 0.7)?;
                t.mean_all(&sc)
            },
            &[a, b],
            step,
        )
        .unwrap();
        assert!(err <= tol, "elementwise chain rel err {err}");

        // matmul + bias + log_softmax + reductions
        let w = rand_tensor(&[3, 4], &mut rng);
        let x = rand_tensor(&[2, 3], &mut rng);
        let bias = rand_tensor(&[4], &mut rng);
        let err = finite_difference_check(
            |t, p| {
                let y = t.matmul(&p[0], &p[1])?;
                let yb = t.add_bias(&y, &p[2])?;
                let ls = t.log_softmax(&yb)?;
                let rows = t.sum_axis(&ls, 1)?;
                let m = t.mean_axis(&rows, 0)?;
                let r = t.reshape(&m, &[1])?;
                t.sum_all(&r)
            },
            &[x, w, bias],
            step,
        )
        .unwrap();
        assert!(err <= tol, "matmul chain rel err {err}");

        // conv + pooling chain
        let xc = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let wc = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let err = finite_difference_check(
            |t, p| {
                let c = t.conv2d(&p[0], &p[1], 1)?;
                let r = t.relu(&c)?;
                let pool = t.avg_pool2(&r)?;
                let gap = t.global_avg_pool(&pool)?;
                t.mean_all(&gap)
            },
            &[xc, wc],
            step,
        )
        .unwrap();
        assert!(err <= tol, "conv chain rel err {err}");

        // channel ops (batch-norm building blocks); wider spread keeps the
        // per-channel variance away from zero so the check is well conditioned
        let mut xb = rand_tensor(&[2, 3, 2, 2], &mut rng);
        for (i, v) in xb.values_mut().iter_mut().enumerate() {
            *v = 2.0 * *v + if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        let err = finite_difference_check(
            |t, p| {
                let mu = t.channel_mean(&p[0])?;
                let xm = t.sub_channel(&p[0], &mu)?;
                let sq = t.mul(&xm, &xm)?;
                let var = t.channel_mean(&sq)?;
                let veps = t.add_scalar(&var, 1e-5)?;
                let denom = t.sqrt(&veps)?;
                let xhat = t.div_channel(&xm, &denom)?;
                let scaled = t.mul_channel(&xhat, &p[1])?;
                let out = t.add_channel(&scaled, &p[2])?;
                // third power: the square alone is an invariant of the
                // normalization, which would leave a zero input gradient
                let sq = t.mul(&out, &out)?;
                let cube = t.mul(&sq, &out)?;
                t.mean_all(&cube)
            },
            &[xb, gamma, beta],
            step,
        )
        .unwrap();
        assert!(err <= tol, "channel chain rel err {err}");

        // row norms / row division (cosine-distance building blocks)
        let u = rand_tensor(&[3, 4], &mut rng);
        let v = rand_tensor(&[3, 4], &mut rng);
        let err = finite_difference_check(
            |t, p| {
                let nu = t.row_l2_norm(&p[0])?;
                let nug = t.add_scalar(&nu, 1e-3)?;
                let un = t.div_rows(&p[0], &nug)?;
                let dots = t.mul(&un, &p[1])?;
                let per_row = t.sum_axis(&dots, 1)?;
                let nv = t.row_l2_norm(&p[1])?;
                let mixed = t.mul(&per_row, &nv)?;
                t.mean_all(&mixed)
            },
            &[u, v],
            step,
        )
        .unwrap();
        assert!(err <= tol, "row-norm chain rel err {err}");

        // sub and scalar interactions
        let p = rand_tensor(&[5], &mut rng);
        let q = rand_tensor(&[5], &mut rng);
        let err = finite_difference_check(
            |t, ps| {
                let d = t.sub(&ps[0], &ps[1])?;
                let sq = t.mul(&d, &d)?;
                t.sum_all(&sq)
            },
            &[p, q],
            step,
        )
        .unwrap();
        assert!(err <= tol, "sub chain rel err {err}");
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        let err = tape.conv2d(&x, &w, 1).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn avg_pool2_rejects_odd_dims() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 5, 4]);
        assert!(tape.avg_pool2(&x).is_err());
    }

    #[test]
    fn multiple_backward_passes_are_independent() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let a = tape.mul(&x, &x).unwrap();
        let sa = tape.sum_all(&a).unwrap();
        let sb = tape.sum_all(&x).unwrap();
        let ga = tape.backward(&sa).unwrap().wrt(&x);
        let gb = tape.backward(&sb).unwrap().wrt(&x);
        assert_eq!(ga.values(), &[2.0, 4.0]);
        assert_eq!(gb.values(), &[1.0, 1.0]);
        // repeat the first target: unchanged by the pass in between
        let ga2 = tape.backward(&sa).unwrap().wrt(&x);
        assert_eq!(ga2.values(), ga.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_detach_forward_identity(vals in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let t = Tensor::new(&[vals.len()], vals.clone()).unwrap();
            let d = t.detach();
            prop_assert_eq!(d.values(), t.values());
            prop_assert!(d.is_constant());
        }

        #[test]
        fn prop_sum_axis_then_sum_all_equals_sum_all(
            vals in proptest::collection::vec(-1e2f64..1e2, 12),
            axis in 0usize..2,
        ) {
            let t = Tensor::new(&[3, 4], vals).unwrap();
            let mut tape = Tape::new();
            let l = tape.leaf(&t);
            let partial = tape.sum_axis(&l, axis).unwrap();
            let s1 = tape.sum_all(&partial).unwrap().item();
            let s2 = tape.sum_all(&l).unwrap().item();
            prop_assert!((s1 - s2).abs() <= 1e-9 * (1.0 + s2.abs()));
        }

        #[test]
        fn prop_gradient_additivity_two_subgraphs(
            vals in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            // f(x) = sum(x^2) + sum(3x) built as two separate subgraphs
            // sharing one leaf: gradient must be the sum of both parts.
            let t = Tensor::new(&[6], vals.clone()).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(&t);
            let sq = tape.mul(&x, &x).unwrap();
            let s1 = tape.sum_all(&sq).unwrap();
            let tripled = tape.scale(&x, 3.0).unwrap();
            let s2 = tape.sum_all(&tripled).unwrap();
            let total = tape.add(&s1, &s2).unwrap();
            let g = tape.backward(&total).unwrap().wrt(&x);
            for (gi, xi) in g.values().iter().zip(&vals) {
                let want = 2.0 * xi + 3.0;
                prop_assert!((gi - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}
