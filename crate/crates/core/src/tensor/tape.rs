use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use super::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: u32,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    /// tanh approximation
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Act(Var, Activation),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Powf(Var, S),
    Clamp(Var, S, S),
    Maximum(Var, Var),
    Minimum(Var, Var),
    GradScale(Var, S),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Wengert list of primitive operations with reverse-mode replay.
///
/// A tape is owned by one thread for the duration of a forward/backward
/// pass. Vars from another tape (or from before [`Tape::clear`]) are
/// rejected.
pub struct Tape<S: Scalar = f64> {
    id: u32,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_buffer<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn act_forward<S: Scalar>(kind: Activation, x: S) -> S {
    match kind {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => S::one() / (S::one() + (-x).exp()),
        Activation::Relu => x.max(S::zero()),
        Activation::Gelu => {
            let half = S::from_f64(0.5);
            let u = S::from_f64(GELU_C) * (x + S::from_f64(GELU_K) * x * x * x);
            half * x * (S::one() + u.tanh())
        }
    }
}

fn act_derivative<S: Scalar>(kind: Activation, x: S, y: S) -> S {
    match kind {
        Activation::Tanh => S::one() - y * y,
        Activation::Sigmoid => y * (S::one() - y),
        Activation::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::Gelu => {
            let half = S::from_f64(0.5);
            let c = S::from_f64(GELU_C);
            let k = S::from_f64(GELU_K);
            let t = (c * (x + k * x * x * x)).tanh();
            half * (S::one() + t)
                + half * x * (S::one() - t * t) * c * (S::one() + S::from_f64(3.0) * k * x * x)
        }
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Outstanding vars become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn node(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(TensorError::Detached);
        }
        self.nodes.get(v.index()).ok_or(TensorError::Detached)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        let var = Var {
            index: self.nodes.len() as u32,
            tape: self.id,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(var)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", value.data())?;
        let var = Var {
            index: self.nodes.len() as u32,
            tape: self.id,
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Ok(var)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Panics on a foreign var; use in code paths that produced the var.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.node(v).expect("var does not belong to this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index())?.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, usize)> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if !is_suffix(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok((sa.to_vec(), self.nodes[b.index()].value.numel().max(1)))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (shape, inner) = self.binary_shapes(name, a, b)?;
        let da = self.nodes[a.index()].value.data();
        let db = self.nodes[b.index()].value.data();
        let data = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % inner]))
            .collect();
        self.push(name, Tensor::new(shape, data)?, op, &[a, b])
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let src = &self.node(x)?.value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = S::from_f64(s);
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = S::from_f64(s);
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let p = S::from_f64(p);
        self.unary("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (S::from_f64(lo), S::from_f64(hi));
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `s`.
    pub fn grad_scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("grad_scale", x, |v| v, Op::GradScale(x, S::from_f64(s)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.unary("activation", x, |v| act_forward(kind, v), Op::Act(x, kind))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        self.broadcast_binary("maximum", a, b, |x, y| x.max(y), Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        self.broadcast_binary("minimum", a, b, |x, y| x.min(y), Op::Minimum(a, b))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.index()].value.data(),
            false,
            self.nodes[b.index()].value.data(),
            false,
            &mut out,
            false,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), &[a, b])
    }

    /// Batched product: `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (kb, n) = if sb.len() == 3 {
            if trans_b {
                (sb[2], sb[1])
            } else {
                (sb[1], sb[2])
            }
        } else {
            (0, 0)
        };
        if !ok || sa[2] != kb {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let mut out = vec![S::zero(); batch * m * n];
        let da = self.nodes[a.index()].value.data();
        let db = self.nodes[b.index()].value.data();
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(
            "bmm",
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            &[a, b],
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = &self.node(x)?.value;
        let rank = src.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: src.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (data, shape) = permute_buffer(src.data(), src.shape(), perm);
        self.push(
            "permute",
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.node(*first)?.value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.index()].value;
                let chunk = t.shape()[axis] * tail;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor::new(out_shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = &self.node(x)?.value;
        let shape = src.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: shape.to_vec(),
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let tail: usize = shape[axis + 1..].iter().product();
        let in_chunk = shape[axis] * tail;
        let mut data = Vec::with_capacity(outer * len * tail);
        for o in 0..outer {
            let base = o * in_chunk + start * tail;
            data.extend_from_slice(&src.data()[base..base + len * tail]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.push(
            "narrow",
            Tensor::new(out_shape, data)?,
            Op::Narrow { x, axis, start },
            &[x],
        )
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = &self.node(x)?.value;
        let l = *src.shape().last().unwrap_or(&0);
        if l == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: src.shape().to_vec(),
                reason: "empty last dimension".into(),
            });
        }
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(l) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = S::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let src = &self.node(x)?.value;
        let d = *src.shape().last().unwrap_or(&0);
        for p in [gamma, beta] {
            let ps = self.node(p)?.value.shape();
            if ps != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: src.shape().to_vec(),
                    rhs: ps.to_vec(),
                });
            }
        }
        let g = self.nodes[gamma.index()].value.data();
        let b = self.nodes[beta.index()].value.data();
        let rows = src.numel() / d.max(1);
        let inv_d = S::one() / S::from_f64(d as f64);
        let eps = S::from_f64(eps);
        let mut data = Vec::with_capacity(src.numel());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in src.data().chunks(d) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            data.extend(
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    /// 2-D convolution of `x[C,H,W]` with `w[Co,C,kh,kw]` and optional `bias[Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let sw = self.node(w)?.value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (kh, kw) = (sw[2], sw[3]);
        if sx[1] + 2 * pad < kh || sx[2] + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: sx,
                reason: format!("kernel {kh}x{kw} larger than padded input"),
            });
        }
        if let Some(bv) = bias {
            let sb = self.node(bv)?.value.shape();
            if sb != [sw[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw.clone(),
                    rhs: sb.to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            kh,
            kw,
            stride,
            pad,
            h_out: (sx[1] + 2 * pad - kh) / stride + 1,
            w_out: (sx[2] + 2 * pad - kw) / stride + 1,
        };
        let c_out = sw[0];
        let cols = im2col(self.nodes[x.index()].value.data(), &geom);
        let p = geom.positions();
        let mut out = vec![S::zero(); c_out * p];
        gemm(
            c_out,
            geom.patch_len(),
            p,
            self.nodes[w.index()].value.data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        if let Some(bv) = bias {
            let bd = self.nodes[bv.index()].value.data();
            for (co, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[co]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let needs_cols = self.nodes[w.index()].requires_grad;
        let value = Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols: if needs_cols { cols } else { Vec::new() },
            },
            &inputs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.node(x)?.value.data().iter().copied().sum::<S>();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let src = &self.node(x)?.value;
        if src.numel() == 0 {
            return Err(TensorError::InvalidArgument("mean of empty tensor".into()));
        }
        let total = src.data().iter().copied().sum::<S>() / S::from_f64(src.numel() as f64);
        self.push("mean", Tensor::scalar(total), Op::Mean(x), &[x])
    }

    /// Reverse pass from a scalar `loss`; gradients land on every node that
    /// depends on a trainable leaf and are readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::Detached);
        }
        self.zero_grads();
        self.grads[loss.index()] = Some(vec![S::one()]);
        for i in (0..=loss.index()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = g {
                    ensure_finite("backward", g)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) -> Result<()> {
        let Tape { nodes, grads, .. } = self;
        let nodes: &[Node<S>] = nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.index()].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let n = &nodes[v.index()];
            if n.requires_grad {
                let slot = grads[v.index()].get_or_insert_with(|| vec![S::zero(); n.value.numel()]);
                f(slot);
            }
        };
        let reduce_into = |dst: &mut [S], src: &mut dyn Iterator<Item = (usize, S)>| {
            let inner = dst.len();
            for (idx, v) in src {
                dst[idx % inner] += v;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| reduce_into(d, &mut g.iter().copied().enumerate()));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| reduce_into(d, &mut g.iter().map(|&g| -g).enumerate()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let inner = vb.len();
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .enumerate()
                        .for_each(|(k, d)| *d += g[k] * vb[k % inner])
                });
                acc(*b, &mut |d| {
                    reduce_into(d, &mut g.iter().zip(va).map(|(&g, &x)| g * x).enumerate())
                });
            }
            Op::Div(a, b) => {
                let (vb, y) = (val(*b), node.value.data());
                let inner = vb.len();
                acc(*a, &mut |d| {
                    d.iter_mut()
                        .enumerate()
                        .for_each(|(k, d)| *d += g[k] / vb[k % inner])
                });
                acc(*b, &mut |d| {
                    reduce_into(
                        d,
                        &mut (0..g.len()).map(|k| -g[k] * y[k] / vb[k % inner]).enumerate(),
                    )
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::GradScale(x, s) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s));
            }
            Op::Matmul(a, b) => {
                let sa = nodes[a.index()].value.shape();
                let sb = nodes[b.index()].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| gemm(m, n, k, g, false, vb, true, d, true));
                acc(*b, &mut |d| gemm(k, m, n, va, true, g, false, d, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[a.index()].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (val(*a), val(*b));
                let trans_b = *trans_b;
                acc(*a, &mut |d| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut d[i * m * k..(i + 1) * m * k], true);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, di, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, di, true);
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_buffer(g, node.value.shape(), &inverse);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(d, &g)| *d += g));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * tail;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.index()].value.shape()[*axis] * tail;
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            d[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = nodes[x.index()].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let tail: usize = in_shape[axis + 1..].iter().product();
                let in_chunk = in_shape[*axis] * tail;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = o * in_chunk + start * tail;
                        d[base..base + len * tail]
                            .iter_mut()
                            .zip(&g[o * len * tail..(o + 1) * len * tail])
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let l = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(l).zip(y.chunks(l)).zip(g.chunks(l)) {
                        let dot: S = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for j in 0..l {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let inv_d = S::one() / S::from_f64(d as f64);
                let xhat: Vec<S> = vx
                    .chunks(d)
                    .enumerate()
                    .flat_map(|(r, row)| row.iter().map(move |&v| (v - mean[r]) * rstd[r]))
                    .collect();
                acc(*x, &mut |dx| {
                    for r in 0..mean.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (k, (&gv, &xh)) in g.iter().zip(&xhat).enumerate() {
                        dg[k % d] += gv * xh;
                    }
                });
                acc(*beta, &mut |db| reduce_into(db, &mut g.iter().copied().enumerate()));
            }
            Op::Act(x, kind) => {
                let (vx, y) = (val(*x), node.value.data());
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * act_derivative(*kind, vx[k], y[k]);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let p = geom.positions();
                let kl = geom.patch_len();
                let vw = val(*w);
                acc(*w, &mut |dw| gemm(c_out, p, kl, g, false, cols, true, dw, true));
                if let Some(bv) = bias {
                    acc(*bv, &mut |db| {
                        for (co, row) in g.chunks(p).enumerate() {
                            db[co] += row.iter().copied().sum::<S>();
                        }
                    });
                }
                acc(*x, &mut |dx| {
                    let mut dcols = vec![S::zero(); kl * p];
                    gemm(kl, c_out, p, vw, true, g, false, &mut dcols, false);
                    col2im(&dcols, geom, dx);
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = S::from_f64(nodes[x.index()].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| (0..d.len()).for_each(|k| d[k] += g[k] / vx[k]));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| (0..d.len()).for_each(|k| d[k] += g[k] * y[k]));
            }
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > S::zero() {
                            d[k] += g[k];
                        } else if vx[k] < S::zero() {
                            d[k] -= g[k];
                        }
                    }
                });
            }
            Op::Powf(x, p) => {
                let vx = val(*x);
                let pm1 = *p - S::one();
                acc(*x, &mut |d| {
                    (0..d.len()).for_each(|k| d[k] += g[k] * *p * vx[k].powf(pm1))
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] >= *lo && vx[k] <= *hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let is_max = matches!(node.op, Op::Maximum(..));
                let pick_a = |k: usize| if is_max { va[k] >= vb[k] } else { va[k] <= vb[k] };
                acc(*a, &mut |d| {
                    (0..d.len()).filter(|&k| pick_a(k)).for_each(|k| d[k] += g[k])
                });
                acc(*b, &mut |d| {
                    (0..d.len()).filter(|&k| !pick_a(k)).for_each(|k| d[k] += g[k])
                });
            }
        }
        Ok(())
    }
}
