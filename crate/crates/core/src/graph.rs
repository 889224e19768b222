//! Reverse-mode automatic differentiation over tensors.
//!
//! Operations append nodes to a [`GradGraph`] tape; [`GradGraph::backward`]
//! walks the tape in reverse, visiting each node once and accumulating
//! gradients additively into every `requires_grad` tensor reachable from the
//! loss. The tape is acyclic by construction (node inputs always precede the
//! node).

use crate::error::{Error, Result};
use crate::kernels::{
    col2im_add, conv_out_extent, im2col, matmul_nn_acc, matmul_nt_acc, matmul_stable,
    matmul_tn_acc,
};
use crate::tensor::{stable_sum, validate_shape, Tensor};

/// Inputs to `log` are clamped to this floor so BCE terms on saturated
/// sigmoids stay finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`GradGraph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Power(Var, f64),
    Abs(Var),
    AddRow { matrix: Var, row: Var },
    Matmul(Var, Var),
    MatmulStable(Var, Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, out_pad: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose2(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    InstanceNorm { x: Var, eps: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    BceWithLogits { logits: Var, targets: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Append-only record of a forward computation, with enough saved state to
/// run the backward pass.
#[derive(Debug, Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward populates its gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires = t.requires_grad;
        self.push(t, Op::Leaf, requires)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s value as a fresh non-differentiable leaf: gradients do
    /// not flow from consumers of the detached value back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.val(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].value.grad_tensor()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let data: Vec<f64>;
        let shape: Vec<usize>;
        if ta.shape() == tb.shape() {
            shape = ta.shape().to_vec();
            data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        } else if tb.is_scalar() && (!ta.is_scalar() || ta.rank() > tb.rank()) {
            shape = ta.shape().to_vec();
            let y = tb.item();
            data = ta.data().iter().map(|&x| f(x, y)).collect();
        } else if ta.is_scalar() {
            // scalar broadcasts into the other operand's shape
            shape = tb.shape().to_vec();
            let x = ta.item();
            data = tb.data().iter().map(|&y| f(x, y)).collect();
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, op, requires))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.val(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(&ta.shape().to_vec(), data).expect("unary preserves shape");
        let requires = self.requires(a);
        self.push(t, op, requires)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with the input clamped to [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_CLAMP).ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), move |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn power(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Power(a, p), move |x| x.powf(p))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.mul(a, s).expect("scalar broadcast cannot fail")
    }

    /// Add a row vector [c] to every row of a matrix [r, c].
    pub fn add_row(&mut self, matrix: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.val(matrix), self.val(row));
        if tm.rank() != 2 || tr.rank() != 1 || tm.shape()[1] != tr.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: tm.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let (r, c) = (tm.shape()[0], tm.shape()[1]);
        let mut data = tm.data().to_vec();
        for i in 0..r {
            for (v, &rv) in data[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *v += rv;
            }
        }
        let t = Tensor::from_vec(&[r, c], data)?;
        let requires = self.requires(matrix) || self.requires(row);
        Ok(self.push(t, Op::AddRow { matrix, row }, requires))
    }

    // ---- matrix products -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims(a, b)?;
        let mut c = vec![0.0; m * n];
        matmul_nn_acc(self.val(a).data(), self.val(b).data(), &mut c, m, k, n);
        let t = Tensor::from_vec(&[m, n], c)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Matmul(a, b), requires))
    }

    /// Matmul whose contraction is order-invariant (see
    /// [`crate::kernels::matmul_stable`]). Used for the attention context so
    /// permuting tokens permutes outputs bitwise-exactly.
    pub fn matmul_stable(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims(a, b)?;
        let mut buf = Vec::new();
        let c = matmul_stable(self.val(a).data(), self.val(b).data(), m, k, n, &mut buf);
        let t = Tensor::from_vec(&[m, n], c)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::MatmulStable(a, b), requires))
    }

    fn matmul_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok((ta.shape()[0], ta.shape()[1], tb.shape()[1]))
    }

    // ---- softmax -----------------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction. The denominator
    /// uses the order-invariant sum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.val(x);
        let (outer, len, inner) = axis_split("softmax", tx.shape(), axis)?;
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(xd[base + t * inner]);
                }
                for t in 0..len {
                    let e = (xd[base + t * inner] - mx).exp();
                    out[base + t * inner] = e;
                    buf[t] = e;
                }
                let denom = stable_sum(&buf);
                for t in 0..len {
                    out[base + t * inner] /= denom;
                }
            }
        }
        let t = Tensor::from_vec(&tx.shape().to_vec(), out)?;
        let requires = self.requires(x);
        Ok(self.push(t, Op::Softmax { x, axis }, requires))
    }

    // ---- convolutions ------------------------------------------------------

    /// 2-D cross-correlation of x [B,Cin,H,W] with w [Cout,Cin,kh,kw] plus
    /// bias [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::for_conv(self.val(x), self.val(w), self.val(b), stride, pad)?;
        let (xd, wd, bd) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        let ConvGeom { bsz, cin, h, w: iw, cout, kh, kw, oh, ow, .. } = geom;
        let k = cin * kh * kw;
        let span = oh * ow;
        let mut out = vec![0.0; bsz * cout * span];
        let mut col = vec![0.0; k * span];
        for bi in 0..bsz {
            im2col(&xd[bi * cin * h * iw..(bi + 1) * cin * h * iw], cin, h, iw, kh, kw, stride, pad, oh, ow, &mut col);
            let out_b = &mut out[bi * cout * span..(bi + 1) * cout * span];
            matmul_nn_acc(wd, &col, out_b, cout, k, span);
            for co in 0..cout {
                let bias = bd[co];
                for v in &mut out_b[co * span..(co + 1) * span] {
                    *v += bias;
                }
            }
        }
        let t = Tensor::from_vec(&[bsz, cout, oh, ow], out)?;
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, requires))
    }

    /// Transposed convolution (the adjoint of [`Self::conv2d`] in its first
    /// argument): x [B,Cin,H,W], w [Cin,Cout,kh,kw], bias [Cout]. Output
    /// spatial extent is (H-1)*stride - 2*pad + kh + out_pad.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::for_conv_t(self.val(x), self.val(w), self.val(b), stride, pad, out_pad)?;
        let (xd, wd, bd) = (self.val(x).data(), self.val(w).data(), self.val(b).data());
        let ConvGeom { bsz, cin, h, w: iw, cout, kh, kw, oh, ow, .. } = geom;
        let kprime = cout * kh * kw;
        let span_in = h * iw;
        let mut out = vec![0.0; bsz * cout * oh * ow];
        let mut cols = vec![0.0; kprime * span_in];
        for bi in 0..bsz {
            cols.fill(0.0);
            // cols[kk, s] = sum_ci w[ci, kk] * x[ci, s]
            matmul_tn_acc(wd, &xd[bi * cin * span_in..(bi + 1) * cin * span_in], &mut cols, kprime, cin, span_in);
            let out_b = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            col2im_add(&cols, cout, oh, ow, kh, kw, stride, pad, h, iw, out_b);
            for co in 0..cout {
                let bias = bd[co];
                for v in &mut out_b[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bias;
                }
            }
        }
        let t = Tensor::from_vec(&[bsz, cout, oh, ow], out)?;
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(t, Op::ConvT2d { x, w, b, stride, pad, out_pad }, requires))
    }

    // ---- reductions and shape ---------------------------------------------

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).data().iter().sum();
        let requires = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), requires)
    }

    /// Mean of all elements, rank-0 result.
    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        let requires = self.requires(a);
        self.push(Tensor::scalar(m), Op::Mean(a), requires)
    }

    /// Reinterpret the row-major buffer under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        let ta = self.val(a);
        let n: usize = shape.iter().product();
        if n != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = Tensor::from_vec(shape, ta.data().to_vec())?;
        let requires = self.requires(a);
        Ok(self.push(t, Op::Reshape(a), requires))
    }

    /// Rank-2 transpose.
    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        if ta.rank() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {:?}", ta.shape()),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let t = Tensor::from_vec(&[c, r], transpose_raw(ta.data(), r, c))?;
        let requires = self.requires(a);
        Ok(self.push(t, Op::Transpose2(a), requires))
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument { op: "concat", msg: "no inputs".into() });
        }
        let first = self.val(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis { op: "concat", axis, shape: first });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.val(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &v in inputs {
            let tv = self.val(v);
            let e = tv.shape()[axis];
            for o in 0..outer {
                let src = &tv.data()[o * e * inner..(o + 1) * e * inner];
                let dst = &mut data[(o * axis_total + offset) * inner..][..e * inner];
                dst.copy_from_slice(src);
            }
            offset += e;
        }
        let t = Tensor::from_vec(&shape, data)?;
        let requires = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, requires))
    }

    /// Contiguous slice of extent `len` starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { op: "slice", axis, shape });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument {
                op: "slice",
                msg: format!("range {}..{} out of extent {} (axis {})", start, start + len, shape[axis], axis),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let e = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &tx.data()[(o * e + start) * inner..][..len * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let t = Tensor::from_vec(&out_shape, data)?;
        let requires = self.requires(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, requires))
    }

    // ---- normalization ------------------------------------------------------

    /// Per-(sample, channel) standardization over H x W; no learned affine.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 4 {
            return Err(Error::InvalidArgument {
                op: "instance_norm",
                msg: format!("expected [B,C,H,W], got {:?}", tx.shape()),
            });
        }
        let hw = tx.shape()[2] * tx.shape()[3];
        let planes = tx.shape()[0] * tx.shape()[1];
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        for pl in 0..planes {
            let src = &xd[pl * hw..(pl + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[pl * hw..(pl + 1) * hw].iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        let t = Tensor::from_vec(&tx.shape().to_vec(), out)?;
        let requires = self.requires(x);
        Ok(self.push(t, Op::InstanceNorm { x, eps }, requires))
    }

    /// Per-token standardization of x [T,d] with learned gain and bias [d].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let ok = tx.rank() == 2
            && tg.rank() == 1
            && tb.rank() == 1
            && tg.shape()[0] == tx.shape()[1]
            && tb.shape()[0] == tx.shape()[1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let (rows, d) = (tx.shape()[0], tx.shape()[1]);
        let (xd, gd, bd) = (tx.data(), tg.data(), tb.data());
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let src = &xd[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (src[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let t = Tensor::from_vec(&[rows, d], out)?;
        let requires = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, requires))
    }

    // ---- losses --------------------------------------------------------------

    /// Mean softplus-stabilized binary cross-entropy over raw logits:
    /// mean(max(z,0) - z*y + ln(1 + exp(-|z|))).
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (tz, ty) = (self.val(logits), self.val(targets));
        if tz.shape() != ty.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: tz.shape().to_vec(),
                right: ty.shape().to_vec(),
            });
        }
        let mut total = 0.0;
        for (&z, &y) in tz.data().iter().zip(ty.data()) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let t = Tensor::scalar(total / tz.numel() as f64);
        let requires = self.requires(logits) || self.requires(targets);
        Ok(self.push(t, Op::BceWithLogits { logits, targets }, requires))
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse pass from a rank-0 loss. Each call accumulates additively into
    /// the persistent `grad` buffers, so running backward twice produces
    /// exactly twice the gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).rank() != 0 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("loss must be rank 0, got shape {:?}", self.val(loss).shape()),
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires {
                continue;
            }
            {
                let node = &mut self.nodes[i];
                let n = node.value.numel();
                let buf = node.value.grad.get_or_insert_with(|| vec![0.0; n]);
                for (acc, &gv) in buf.iter_mut().zip(&g) {
                    *acc += gv;
                }
            }
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, at: usize, op: &Op, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let acc = |scratch: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            let slot = scratch[v.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
            for (a, b) in slot.iter_mut().zip(&contrib) {
                *a += b;
            }
        };
        // Gradient for a possibly-scalar operand: collapse by summation.
        let fit = |target: usize, v: Vec<f64>| -> Vec<f64> {
            if target == 1 && v.len() > 1 {
                vec![v.iter().sum()]
            } else {
                v
            }
        };
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(a) {
                    acc(scratch, a, fit(self.val(a).numel(), g.to_vec()));
                }
                if self.requires(b) {
                    acc(scratch, b, fit(self.val(b).numel(), g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.requires(a) {
                    acc(scratch, a, fit(self.val(a).numel(), g.to_vec()));
                }
                if self.requires(b) {
                    acc(scratch, b, fit(self.val(b).numel(), g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                if self.requires(a) {
                    let da: Vec<f64> = if tb.is_scalar() {
                        let y = tb.item();
                        g.iter().map(|&gv| gv * y).collect()
                    } else {
                        g.iter().zip(tb.data()).map(|(&gv, &y)| gv * y).collect()
                    };
                    acc(scratch, a, fit(ta.numel(), da));
                }
                if self.requires(b) {
                    let db: Vec<f64> = if ta.is_scalar() {
                        let x = ta.item();
                        g.iter().map(|&gv| gv * x).collect()
                    } else {
                        g.iter().zip(ta.data()).map(|(&gv, &x)| gv * x).collect()
                    };
                    acc(scratch, b, fit(tb.numel(), db));
                }
            }
            Op::Neg(a) => {
                if self.requires(a) {
                    acc(scratch, a, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Exp(a) => {
                if self.requires(a) {
                    let out = self.nodes[at].value.data();
                    acc(scratch, a, g.iter().zip(out).map(|(&gv, &e)| gv * e).collect());
                }
            }
            Op::Log(a) => {
                if self.requires(a) {
                    let x = self.val(a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= LOG_CLAMP { gv / xv } else { 0.0 })
                        .collect();
                    acc(scratch, a, d);
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(a) {
                    let out = self.nodes[at].value.data();
                    acc(scratch, a, g.iter().zip(out).map(|(&gv, &s)| gv * s * (1.0 - s)).collect());
                }
            }
            Op::Relu(a) => {
                if self.requires(a) {
                    let x = self.val(a).data();
                    acc(scratch, a, g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect());
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.requires(a) {
                    let x = self.val(a).data();
                    acc(
                        scratch,
                        a,
                        g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv }).collect(),
                    );
                }
            }
            Op::Power(a, p) => {
                if self.requires(a) {
                    let x = self.val(a).data();
                    acc(scratch, a, g.iter().zip(x).map(|(&gv, &xv)| gv * p * xv.powf(p - 1.0)).collect());
                }
            }
            Op::Abs(a) => {
                if self.requires(a) {
                    let x = self.val(a).data();
                    acc(
                        scratch,
                        a,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::AddRow { matrix, row } => {
                let c = self.val(row).numel();
                if self.requires(matrix) {
                    acc(scratch, matrix, g.to_vec());
                }
                if self.requires(row) {
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks_exact(c) {
                        for (d, &gv) in dr.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                    acc(scratch, row, dr);
                }
            }
            Op::Matmul(a, b) | Op::MatmulStable(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires(a) {
                    // dA = g * B^T
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g, tb.data(), &mut da, m, n, k);
                    acc(scratch, a, da);
                }
                if self.requires(b) {
                    // dB = A^T * g
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(ta.data(), g, &mut db, k, m, n);
                    acc(scratch, b, db);
                }
            }
            Op::Softmax { x, axis } => {
                if self.requires(x) {
                    let out = self.nodes[at].value.data();
                    let shape = self.nodes[at].value.shape();
                    let (outer, len, inner) = axis_split("softmax", shape, axis).expect("validated");
                    let mut d = vec![0.0; out.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for t in 0..len {
                                let idx = base + t * inner;
                                dot += g[idx] * out[idx];
                            }
                            for t in 0..len {
                                let idx = base + t * inner;
                                d[idx] = out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    acc(scratch, x, d);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = ConvGeom::for_conv(self.val(x), self.val(w), self.val(b), stride, pad)
                    .expect("validated at forward");
                self.conv2d_backward(g, x, w, b, geom, scratch, &acc);
            }
            Op::ConvT2d { x, w, b, stride, pad, out_pad } => {
                let geom =
                    ConvGeom::for_conv_t(self.val(x), self.val(w), self.val(b), stride, pad, out_pad)
                        .expect("validated at forward");
                self.conv_t2d_backward(g, x, w, b, geom, scratch, &acc);
            }
            Op::Sum(a) => {
                if self.requires(a) {
                    acc(scratch, a, vec![g[0]; self.val(a).numel()]);
                }
            }
            Op::Mean(a) => {
                if self.requires(a) {
                    let n = self.val(a).numel();
                    acc(scratch, a, vec![g[0] / n as f64; n]);
                }
            }
            Op::Reshape(a) => {
                if self.requires(a) {
                    acc(scratch, a, g.to_vec());
                }
            }
            Op::Transpose2(a) => {
                if self.requires(a) {
                    let s = self.nodes[at].value.shape();
                    acc(scratch, a, transpose_raw(g, s[0], s[1]));
                }
            }
            Op::Concat { ref inputs, axis } => {
                let shape = self.nodes[at].value.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut offset = 0;
                for &v in inputs {
                    let e = self.val(v).shape()[axis];
                    if self.requires(v) {
                        let mut d = vec![0.0; outer * e * inner];
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..e * inner];
                            d[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                        }
                        acc(scratch, v, d);
                    }
                    offset += e;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.requires(x) {
                    let xshape = self.val(x).shape();
                    let len = self.nodes[at].value.shape()[axis];
                    let outer: usize = xshape[..axis].iter().product();
                    let inner: usize = xshape[axis + 1..].iter().product();
                    let e = xshape[axis];
                    let mut d = vec![0.0; self.val(x).numel()];
                    for o in 0..outer {
                        let dst = &mut d[(o * e + start) * inner..][..len * inner];
                        dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(scratch, x, d);
                }
            }
            Op::InstanceNorm { x, eps } => {
                if self.requires(x) {
                    let tx = self.val(x);
                    let hw = tx.shape()[2] * tx.shape()[3];
                    let planes = tx.shape()[0] * tx.shape()[1];
                    let xd = tx.data();
                    let mut d = vec![0.0; xd.len()];
                    for pl in 0..planes {
                        let src = &xd[pl * hw..(pl + 1) * hw];
                        let gsl = &g[pl * hw..(pl + 1) * hw];
                        let n = hw as f64;
                        let mean = src.iter().sum::<f64>() / n;
                        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gsl.iter().sum::<f64>() / n;
                        let mut gdot = 0.0;
                        for (gv, &xv) in gsl.iter().zip(src) {
                            gdot += gv * (xv - mean) * inv;
                        }
                        gdot /= n;
                        for j in 0..hw {
                            let xhat = (src[j] - mean) * inv;
                            d[pl * hw + j] = inv * (gsl[j] - gmean - xhat * gdot);
                        }
                    }
                    acc(scratch, x, d);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = self.val(x);
                let (rows, dim) = (tx.shape()[0], tx.shape()[1]);
                let xd = tx.data();
                let gaind = self.val(gain).data();
                let need_x = self.requires(x);
                let need_g = self.requires(gain);
                let need_b = self.requires(bias);
                let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut dgain = if need_g { vec![0.0; dim] } else { Vec::new() };
                let mut dbias = if need_b { vec![0.0; dim] } else { Vec::new() };
                for r in 0..rows {
                    let src = &xd[r * dim..(r + 1) * dim];
                    let gsl = &g[r * dim..(r + 1) * dim];
                    let n = dim as f64;
                    let mean = src.iter().sum::<f64>() / n;
                    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    if need_g || need_b {
                        for j in 0..dim {
                            let xhat = (src[j] - mean) * inv;
                            if need_g {
                                dgain[j] += gsl[j] * xhat;
                            }
                            if need_b {
                                dbias[j] += gsl[j];
                            }
                        }
                    }
                    if need_x {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..dim {
                            let dxhat = gsl[j] * gaind[j];
                            let xhat = (src[j] - mean) * inv;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..dim {
                            let dxhat = gsl[j] * gaind[j];
                            let xhat = (src[j] - mean) * inv;
                            dx[r * dim + j] =
                                inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
                if need_x {
                    acc(scratch, x, dx);
                }
                if need_g {
                    acc(scratch, gain, dgain);
                }
                if need_b {
                    acc(scratch, bias, dbias);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let tz = self.val(logits);
                let n = tz.numel() as f64;
                let g0 = g[0];
                if self.requires(logits) {
                    let ty = self.val(targets);
                    let d = tz
                        .data()
                        .iter()
                        .zip(ty.data())
                        .map(|(&z, &y)| g0 * (1.0 / (1.0 + (-z).exp()) - y) / n)
                        .collect();
                    acc(scratch, logits, d);
                }
                if self.requires(targets) {
                    let d = tz.data().iter().map(|&z| g0 * (-z) / n).collect();
                    acc(scratch, targets, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &[f64],
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        scratch: &mut [Option<Vec<f64>>],
        acc: &impl Fn(&mut [Option<Vec<f64>>], Var, Vec<f64>),
    ) {
        let ConvGeom { bsz, cin, h, w: iw, cout, kh, kw, oh, ow, stride, pad } = geom;
        let k = cin * kh * kw;
        let span = oh * ow;
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        let need_x = self.requires(x);
        let need_w = self.requires(w);
        let need_b = self.requires(b);
        let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; wd.len()] } else { Vec::new() };
        let mut db = if need_b { vec![0.0; cout] } else { Vec::new() };
        let mut col = vec![0.0; k * span];
        let mut dcol = if need_x { vec![0.0; k * span] } else { Vec::new() };
        for bi in 0..bsz {
            let g_b = &g[bi * cout * span..(bi + 1) * cout * span];
            if need_w {
                im2col(&xd[bi * cin * h * iw..(bi + 1) * cin * h * iw], cin, h, iw, kh, kw, stride, pad, oh, ow, &mut col);
                // dW[co, kk] += sum_s g[co, s] * col[kk, s]
                matmul_nt_acc(g_b, &col, &mut dw, cout, span, k);
            }
            if need_x {
                dcol.fill(0.0);
                // dcol[kk, s] = sum_co w[co, kk] * g[co, s]
                matmul_tn_acc(wd, g_b, &mut dcol, k, cout, span);
                col2im_add(
                    &dcol,
                    cin,
                    h,
                    iw,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx[bi * cin * h * iw..(bi + 1) * cin * h * iw],
                );
            }
            if need_b {
                for co in 0..cout {
                    db[co] += g_b[co * span..(co + 1) * span].iter().sum::<f64>();
                }
            }
        }
        if need_x {
            acc(scratch, x, dx);
        }
        if need_w {
            acc(scratch, w, dw);
        }
        if need_b {
            acc(scratch, b, db);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t2d_backward(
        &self,
        g: &[f64],
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        scratch: &mut [Option<Vec<f64>>],
        acc: &impl Fn(&mut [Option<Vec<f64>>], Var, Vec<f64>),
    ) {
        let ConvGeom { bsz, cin, h, w: iw, cout, kh, kw, oh, ow, stride, pad } = geom;
        let kprime = cout * kh * kw;
        let span_in = h * iw;
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        let need_x = self.requires(x);
        let need_w = self.requires(w);
        let need_b = self.requires(b);
        let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; wd.len()] } else { Vec::new() };
        let mut db = if need_b { vec![0.0; cout] } else { Vec::new() };
        let mut dcols = vec![0.0; kprime * span_in];
        for bi in 0..bsz {
            let g_b = &g[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            // dcols[kk, s]: gather of g under the scatter geometry
            im2col(g_b, cout, oh, ow, kh, kw, stride, pad, h, iw, &mut dcols);
            if need_x {
                // dx[ci, s] = sum_kk w[ci, kk] * dcols[kk, s]
                matmul_nn_acc(wd, &dcols, &mut dx[bi * cin * span_in..(bi + 1) * cin * span_in], cin, kprime, span_in);
            }
            if need_w {
                // dW[ci, kk] += sum_s x[ci, s] * dcols[kk, s]
                matmul_nt_acc(&xd[bi * cin * span_in..(bi + 1) * cin * span_in], &dcols, &mut dw, cin, span_in, kprime);
            }
            if need_b {
                for co in 0..cout {
                    db[co] += g_b[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                }
            }
        }
        if need_x {
            acc(scratch, x, dx);
        }
        if need_w {
            acc(scratch, w, dw);
        }
        if need_b {
            acc(scratch, b, db);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}


impl ConvGeom {
    fn for_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!("expected rank-4 input/weight, got {:?} and {:?}", x.shape(), w.shape()),
            });
        }
        let (bsz, cin, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.rank() != 1 || b.shape()[0] != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: vec![cout],
                right: b.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument { op: "conv2d", msg: "stride must be >= 1".into() });
        }
        if kh > h + 2 * pad || kw > iw + 2 * pad {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, iw + 2 * pad),
            });
        }
        let oh = conv_out_extent(h, kh, stride, pad);
        let ow = conv_out_extent(iw, kw, stride, pad);
        Ok(ConvGeom { bsz, cin, h, w: iw, cout, kh, kw, oh, ow, stride, pad })
    }

    fn for_conv_t(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<ConvGeom> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::InvalidArgument {
                op: "conv2d_transpose",
                msg: format!("expected rank-4 input/weight, got {:?} and {:?}", x.shape(), w.shape()),
            });
        }
        let (bsz, cin, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (wcin, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if b.rank() != 1 || b.shape()[0] != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose bias",
                left: vec![cout],
                right: b.shape().to_vec(),
            });
        }
        if stride == 0 || out_pad >= stride {
            return Err(Error::InvalidArgument {
                op: "conv2d_transpose",
                msg: format!("need stride >= 1 and out_pad < stride, got stride {stride}, out_pad {out_pad}"),
            });
        }
        let oh_signed = (h - 1) * stride + kh + out_pad;
        let ow_signed = (iw - 1) * stride + kw + out_pad;
        if oh_signed <= 2 * pad || ow_signed <= 2 * pad {
            return Err(Error::InvalidArgument {
                op: "conv2d_transpose",
                msg: format!("padding {pad} consumes the whole output ({oh_signed}x{ow_signed} before pad)"),
            });
        }
        let oh = oh_signed - 2 * pad;
        let ow = ow_signed - 2 * pad;
        Ok(ConvGeom { bsz, cin, h, w: iw, cout, kh, kw, oh, ow, stride, pad })
    }
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis { op, axis, shape: shape.to_vec() });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn transpose_raw(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}
