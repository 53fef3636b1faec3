//! Wengert-style tape: every primitive appends a node holding its value and
//! the information its backward rule needs. `backward` walks the nodes in
//! reverse once, accumulating adjoints additively across fan-out.

use super::kernels::{self, matmul_into};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Detach,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: S,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    Gelu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Softplus {
        a: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        a: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
    Scatter {
        a: Var,
        idx: Vec<usize>,
    },
    Conv3x3 {
        x: Var,
        k: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of every differentiable leaf reachable from the loss.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

/// Records primitives for one forward/backward cycle.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    ln_eps: S,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ln_eps: S::of(LAYERNORM_EPS),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.inputs_require_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op<S>) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Detach => false,
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => rg(a) || rg(b),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => rg(a) || rg(b),
            Op::Linear { x, w, b, .. } => rg(x) || rg(w) || b.as_ref().is_some_and(rg),
            Op::LayerNorm { x, g, b, .. } => rg(x) || rg(g) || rg(b),
            Op::Conv3x3 { x, k } => rg(x) || rg(k),
            Op::Concat { parts, .. } => parts.iter().any(rg),
            Op::SoftmaxCe { logits, .. } => rg(logits),
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Sigmoid { a }
            | Op::Softplus { a }
            | Op::Softmax { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Narrow { a, .. }
            | Op::Mean { a, .. }
            | Op::Sum { a }
            | Op::Gather { a, .. }
            | Op::Scatter { a, .. } => rg(a),
        }
    }

    /// Registers a leaf. Differentiable leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Stop-gradient: same values, no path back to `x`'s producers.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::Detach, value, "detach")
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, k, n, out_shape) = self.linear_dims("matmul", a, b)?;
        let mut out = vec![S::zero(); rows * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            rows,
            k,
            n,
            S::one(),
            S::zero(),
            &mut out,
        );
        self.push(Op::MatMul { a, b, rows }, Tensor::from_parts(out_shape, out), "matmul")
    }

    /// Affine map `x[..., k] w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, k, n, out_shape) = self.linear_dims("linear", x, w)?;
        let mut out = vec![S::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [n] {
                return Err(Error::shape("linear", bias.shape(), &[n]));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { S::one() } else { S::zero() };
        matmul_into(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            rows,
            k,
            n,
            S::one(),
            beta,
            &mut out,
        );
        self.push(
            Op::Linear { x, w, b, rows },
            Tensor::from_parts(out_shape, out),
            "linear",
        )
    }

    fn linear_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(op, sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        Ok((rows, k, n, out_shape))
    }

    /// Batched product over the leading axis: `a[B, m, k] x b[B, k, n]`, or
    /// `a x b^T` with `b[B, n, k]` when `trans_b`. Scaled by `alpha`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: S) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let mut out = vec![S::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul_into(
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                m,
                k,
                n,
                alpha,
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Op::Bmm { a, b, trans_b, alpha },
            Tensor::from_parts(vec![batch, m, n], out),
            "bmm",
        )
    }

    /// Checks `b`'s shape is a trailing suffix of `a`'s; returns the repeat count.
    fn broadcast_reps(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        let nb = self.value(b).numel();
        Ok(self.value(a).numel().checked_div(nb).unwrap_or(0))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.broadcast_reps(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let width = bv.numel().max(1);
        let mut out = Vec::with_capacity(av.numel());
        for chunk in av.data().chunks(width) {
            out.extend(chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
        }
        let shape = av.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, out), name)
    }

    /// Elementwise sum; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Hadamard product; `b` may broadcast over leading dimensions of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary(a, "scale", |x| x * c, Op::Scale { a, c })
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let av = self.value(a);
        let out: Vec<S> = av.data().iter().map(|&x| f(x)).collect();
        let shape = av.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, out), name)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", kernels::gelu, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", kernels::sigmoid, Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "softplus", kernels::softplus, Op::Softplus { a })
    }

    /// Normalises over the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap_or(&0);
        if width == 0 {
            return Err(Error::invalid("layernorm", "channel dimension of size 0"));
        }
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape("layernorm", &sx, self.shape(gain)));
        }
        let (xhat, rstd) = kernels::layernorm_stats(self.value(x).data(), width, self.ln_eps);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks_exact(width) {
            out.extend(row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b));
        }
        self.push(
            Op::LayerNorm {
                x,
                g: gain,
                b: bias,
                xhat,
                rstd,
            },
            Tensor::from_parts(sx, out),
            "layernorm",
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let width = *av.shape().last().unwrap_or(&1);
        let mut out = vec![S::zero(); av.numel()];
        kernels::softmax_rows(av.data(), width, &mut out);
        let shape = av.shape().to_vec();
        self.push(Op::Softmax { a }, Tensor::from_parts(shape, out), "softmax")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let mut probs = vec![S::zero(); lv.numel()];
        kernels::softmax_rows(lv.data(), classes, &mut probs);
        let mut total = S::zero();
        for (row, &label) in lv.data().chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total = total + (lse - row[label]);
        }
        let loss = total / S::of(labels.len() as f64);
        self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            "softmax_cross_entropy",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape { a }, value, "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len()
            || perm
                .iter()
                .any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("bad permutation {perm:?} for {sa:?}"),
            ));
        }
        let out = kernels::permute(self.value(a).data(), &sa, perm);
        let shape = perm.iter().map(|&p| sa[p]).collect();
        self.push(
            Op::Permute { a, perm: perm.to_vec() },
            Tensor::from_parts(shape, out),
            "permute",
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {sa:?}", start + len),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        self.push(Op::Narrow { a, axis, start }, Tensor::from_parts(shape, out), "narrow")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, out),
            "concat",
        )
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(Error::invalid("mean", format!("axis {axis} of {sa:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let len = sa[axis];
        let inv = S::one() / S::of(len as f64);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let mut shape = sa;
        shape.remove(axis);
        self.push(Op::Mean { a, axis }, Tensor::from_parts(shape, out), "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum { a }, Tensor::scalar(total), "sum")
    }

    /// Selects `idx` along the last dimension.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let width = *sa.last().ok_or_else(|| Error::invalid("gather", "rank 0"))?;
        if idx.iter().any(|&i| i >= width) {
            return Err(Error::invalid(
                "gather",
                format!("index out of range for width {width}"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() / width.max(1) * idx.len());
        for row in src.chunks_exact(width) {
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = idx.len();
        self.push(
            Op::Gather { a, idx: idx.to_vec() },
            Tensor::from_parts(shape, out),
            "gather",
        )
    }

    /// Places the last dimension of `a` at positions `idx` of a zero tensor
    /// whose last dimension is `width`.
    pub fn scatter(&mut self, a: Var, idx: &[usize], width: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let m = *sa.last().ok_or_else(|| Error::invalid("scatter", "rank 0"))?;
        if m != idx.len() || idx.iter().any(|&i| i >= width) {
            return Err(Error::invalid(
                "scatter",
                format!("{} indices for width {width}", idx.len()),
            ));
        }
        let src = self.value(a).data();
        let rows = src.len().checked_div(m).unwrap_or(0);
        let mut out = vec![S::zero(); rows * width];
        for (row, dst) in src.chunks_exact(m.max(1)).zip(out.chunks_exact_mut(width)) {
            for (&v, &i) in row.iter().zip(idx) {
                dst[i] = v;
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = width;
        self.push(
            Op::Scatter { a, idx: idx.to_vec() },
            Tensor::from_parts(shape, out),
            "scatter",
        )
    }

    /// Same-padded 3x3 convolution of an `n x s x s x c_in` grid with a
    /// `[9 * c_in, c_out]` kernel (im2col + GEMM).
    pub fn conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid("conv3x3", format!("expected n x h x w x c, got {sx:?}")));
        }
        if sx[1] != sx[2] {
            return Err(Error::invalid(
                "conv3x3",
                format!("non-square grid {}x{}", sx[1], sx[2]),
            ));
        }
        let (n, side, c) = (sx[0], sx[1], sx[3]);
        if sk.len() != 2 || sk[0] != 9 * c {
            return Err(Error::shape("conv3x3", &sx, &sk));
        }
        let co = sk[1];
        let col = kernels::im2col3x3(self.value(x).data(), n, side, c);
        let rows = n * side * side;
        let mut out = vec![S::zero(); rows * co];
        matmul_into(
            &col,
            false,
            self.value(kernel).data(),
            false,
            rows,
            9 * c,
            co,
            S::one(),
            S::zero(),
            &mut out,
        );
        self.push(
            Op::Conv3x3 { x, k: kernel },
            Tensor::from_parts(vec![n, side, side, co], out),
            "conv3x3",
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b, rows } | Op::Linear { x: a, w: b, rows, .. } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                if self.wants(*a) {
                    let buf = grad_buf(grads, *a, rows * k);
                    matmul_into(g, false, val(*b), true, *rows, n, k, S::one(), S::one(), buf);
                }
                if self.wants(*b) {
                    let buf = grad_buf(grads, *b, k * n);
                    matmul_into(val(*a), true, g, false, k, *rows, n, S::one(), S::one(), buf);
                }
                if let Op::Linear { b: Some(bias), .. } = &node.op {
                    if self.wants(*bias) {
                        let buf = grad_buf(grads, *bias, n);
                        for row in g.chunks_exact(n) {
                            for (d, &v) in buf.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b, alpha } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    let buf = grad_buf(grads, *a, batch * m * k);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // dA = alpha * dC * op(B)^T
                        matmul_into(
                            gi,
                            false,
                            bi,
                            !trans_b,
                            m,
                            n,
                            k,
                            *alpha,
                            S::one(),
                            &mut buf[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if self.wants(*b) {
                    let buf = grad_buf(grads, *b, batch * k * n);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut buf[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored n x k: dB = alpha * dC^T * A
                            matmul_into(gi, true, ai, false, n, m, k, *alpha, S::one(), dst);
                        } else {
                            matmul_into(ai, true, gi, false, k, m, n, *alpha, S::one(), dst);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                if self.wants(*a) {
                    accumulate(grad_buf(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let width = self.nodes[b.0].value.numel();
                    let neg = matches!(node.op, Op::Sub { .. });
                    let buf = grad_buf(grads, *b, width);
                    for chunk in g.chunks_exact(width.max(1)) {
                        for (d, &v) in buf.iter_mut().zip(chunk) {
                            *d = if neg { *d - v } else { *d + v };
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let width = bv.len().max(1);
                if self.wants(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    for (dst, gc) in buf.chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                        for ((d, &gv), &bw) in dst.iter_mut().zip(gc).zip(bv) {
                            *d = *d + gv * bw;
                        }
                    }
                }
                if self.wants(*b) {
                    let buf = grad_buf(grads, *b, bv.len());
                    for (gc, ac) in g.chunks_exact(width).zip(av.chunks_exact(width)) {
                        for ((d, &gv), &x) in buf.iter_mut().zip(gc).zip(ac) {
                            *d = *d + gv * x;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let buf = grad_buf(grads, *a, g.len());
                for (d, &v) in buf.iter_mut().zip(g) {
                    *d = *d + v * *c;
                }
            }
            Op::Gelu { a } => {
                let buf = grad_buf(grads, *a, g.len());
                for ((d, &v), &x) in buf.iter_mut().zip(g).zip(val(*a)) {
                    *d = *d + v * kernels::gelu_grad(x);
                }
            }
            Op::Sigmoid { a } => {
                let buf = grad_buf(grads, *a, g.len());
                for ((d, &v), &y) in buf.iter_mut().zip(g).zip(node.value.data()) {
                    *d = *d + v * y * (S::one() - y);
                }
            }
            Op::Softplus { a } => {
                let buf = grad_buf(grads, *a, g.len());
                for ((d, &v), &x) in buf.iter_mut().zip(g).zip(val(*a)) {
                    *d = *d + v * kernels::sigmoid(x);
                }
            }
            Op::LayerNorm {
                x,
                g: gain,
                b,
                xhat,
                rstd,
            } => {
                let width = self.shape(*gain)[0];
                let gv = val(*gain);
                if self.wants(*gain) {
                    let buf = grad_buf(grads, *gain, width);
                    for (gc, hc) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                        for ((d, &dy), &h) in buf.iter_mut().zip(gc).zip(hc) {
                            *d = *d + dy * h;
                        }
                    }
                }
                if self.wants(*b) {
                    let buf = grad_buf(grads, *b, width);
                    for gc in g.chunks_exact(width) {
                        accumulate(buf, gc);
                    }
                }
                if self.wants(*x) {
                    let inv_w = S::one() / S::of(width as f64);
                    let buf = grad_buf(grads, *x, g.len());
                    let mut dh = vec![S::zero(); width];
                    for (r, ((dst, gc), hc)) in buf
                        .chunks_exact_mut(width)
                        .zip(g.chunks_exact(width))
                        .zip(xhat.chunks_exact(width))
                        .enumerate()
                    {
                        let mut mean_dh = S::zero();
                        let mut mean_dhh = S::zero();
                        for j in 0..width {
                            dh[j] = gc[j] * gv[j];
                            mean_dh = mean_dh + dh[j];
                            mean_dhh = mean_dhh + dh[j] * hc[j];
                        }
                        mean_dh = mean_dh * inv_w;
                        mean_dhh = mean_dhh * inv_w;
                        for j in 0..width {
                            dst[j] = dst[j] + rstd[r] * (dh[j] - mean_dh - hc[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                let buf = grad_buf(grads, *a, g.len());
                for ((dst, gc), yc) in buf
                    .chunks_exact_mut(width)
                    .zip(g.chunks_exact(width))
                    .zip(y.chunks_exact(width))
                {
                    let dot: S = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gc).zip(yc) {
                        *d = *d + yv * (gv - dot);
                    }
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / S::of(labels.len() as f64);
                let buf = grad_buf(grads, *logits, probs.len());
                for (r, (dst, pc)) in buf
                    .chunks_exact_mut(classes)
                    .zip(probs.chunks_exact(classes))
                    .enumerate()
                {
                    for (j, (d, &p)) in dst.iter_mut().zip(pc).enumerate() {
                        let target = if j == labels[r] { S::one() } else { S::zero() };
                        *d = *d + scale * (p - target);
                    }
                }
            }
            Op::Reshape { a } => accumulate(grad_buf(grads, *a, g.len()), g),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = kernels::permute(g, node.value.shape(), &inv);
                accumulate(grad_buf(grads, *a, g.len()), &back);
            }
            Op::Narrow { a, axis, start } => {
                let sa = self.shape(*a);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let full = sa[*axis];
                let buf = grad_buf(grads, *a, outer * full * inner);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    accumulate(
                        &mut buf[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let buf = grad_buf(grads, p, outer * len);
                        for o in 0..outer {
                            accumulate(
                                &mut buf[o * len..(o + 1) * len],
                                &g[o * total + offset..o * total + offset + len],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Mean { a, axis } => {
                let sa = self.shape(*a);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let len = sa[*axis];
                let inv = S::one() / S::of(len as f64);
                let buf = grad_buf(grads, *a, outer * len * inner);
                for o in 0..outer {
                    let gc = &g[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let dst = &mut buf[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(gc) {
                            *d = *d + v * inv;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let n = self.nodes[a.0].value.numel();
                let buf = grad_buf(grads, *a, n);
                buf.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::Gather { a, idx } => {
                let width = *self.shape(*a).last().unwrap();
                let n = self.nodes[a.0].value.numel();
                let buf = grad_buf(grads, *a, n);
                for (dst, gc) in buf.chunks_exact_mut(width).zip(g.chunks_exact(idx.len().max(1))) {
                    for (&i, &v) in idx.iter().zip(gc) {
                        dst[i] = dst[i] + v;
                    }
                }
            }
            Op::Scatter { a, idx } => {
                let width = *node.value.shape().last().unwrap();
                let n = self.nodes[a.0].value.numel();
                let buf = grad_buf(grads, *a, n);
                for (dst, gc) in buf.chunks_exact_mut(idx.len().max(1)).zip(g.chunks_exact(width)) {
                    for (d, &i) in dst.iter_mut().zip(idx) {
                        *d = *d + gc[i];
                    }
                }
            }
            Op::Conv3x3 { x, k } => {
                let sx = self.shape(*x);
                let (n, side, c) = (sx[0], sx[1], sx[3]);
                let co = self.shape(*k)[1];
                let rows = n * side * side;
                if self.wants(*k) {
                    let col = kernels::im2col3x3(val(*x), n, side, c);
                    let buf = grad_buf(grads, *k, 9 * c * co);
                    matmul_into(&col, true, g, false, 9 * c, rows, co, S::one(), S::one(), buf);
                }
                if self.wants(*x) {
                    let mut dcol = vec![S::zero(); rows * 9 * c];
                    matmul_into(g, false, val(*k), true, rows, co, 9 * c, S::one(), S::zero(), &mut dcol);
                    let buf = grad_buf(grads, *x, rows * c);
                    kernels::col2im3x3(&dcol, n, side, c, buf);
                }
            }
        }
    }
}

fn grad_buf<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn accumulate<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let sp = tape.softplus(z).unwrap();
        assert!((tape.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let m = tape.constant(t(&[3], &[0.0, 1.0, 0.5])).unwrap();
        let h = tape.mul(a, m).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 2.0, 1.5]);
    }

    #[test]
    fn broadcast_is_trailing_only() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let ok = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
        let bad = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        assert!(tape.add(a, ok).is_ok());
        assert!(tape.add(a, bad).is_err());
        assert!(tape.mul(ok, a).is_err());
    }

    #[test]
    fn layernorm_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 5.0])).unwrap();
        let g = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let b = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        let out = tape.value(y).data();
        let expect = 1.0 / (1.0f64 + LAYERNORM_EPS).sqrt();
        assert!((out[0] + expect).abs() < 1e-12);
        assert!((out[1] - expect).abs() < 1e-12);
        assert!((out[0] + 1.0).abs() < 1e-5);
        assert_eq!(&out[2..], &[0.0, 0.0]);

        let empty = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        let g0 = tape.constant(Tensor::zeros(&[0])).unwrap();
        assert!(tape.layernorm(empty, g0, g0).is_err());
    }

    #[test]
    fn cross_entropy_values_and_label_check() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let sharp = tape.constant(t(&[1, 3], &[0.0, 1e6, 0.0])).unwrap();
        let l = tape.softmax_cross_entropy(sharp, &[1]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 4, 1]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let d = tape.detach(w).unwrap();
        assert_eq!(tape.value(d).data(), tape.value(w).data());
        let s = tape.sum(d).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let a = tape.add(w, w).unwrap();
        let m = tape.mul(a, w).unwrap(); // 2 w^2
        let s = tape.sum(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn conv_identity_and_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut ident = vec![0.0; 9];
        ident[4] = 1.0;
        let k = tape.constant(t(&[9, 1], &ident)).unwrap();
        let y = tape.conv3x3(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = tape.constant(Tensor::full(&[1, 3, 3, 1], 1.0)).unwrap();
        let kk = tape.constant(Tensor::full(&[9, 1], 1.0)).unwrap();
        let z = tape.conv3x3(ones, kk).unwrap();
        let v = tape.value(z).data();
        assert_eq!(v[4], 9.0);
        assert_eq!(v[0], 4.0);
        assert_eq!(v[1], 6.0);

        let rect = tape.constant(Tensor::zeros(&[1, 2, 3, 1])).unwrap();
        assert!(tape.conv3x3(rect, kk).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.constant(Tensor::full(&[1], f64::NAN)).is_err());
        let big = tape.constant(Tensor::full(&[1], 1e300)).unwrap();
        assert!(matches!(tape.mul(big, big), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let g = tape.gather(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 1.0, 6.0, 4.0]);
        let s = tape.scatter(g, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
        let total = tape.sum(s).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }
}
