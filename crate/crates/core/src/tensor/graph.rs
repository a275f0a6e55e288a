//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Leaves copy
//! their values in; parameter gradients are read back out with
//! [`Graph::grad`].

use super::kernels::{self, ConvGeom, MatmulGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        // flat index maps, present only when the operand was broadcast
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    AddScalar(Var),
    MulScalar(Var, T),
    MaxScalar(Var, T),
    Abs(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Gelu(Var),
    SoftmaxLast(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Sum(Var),
    Mean(Var),
    MaxOverChannel {
        input: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    LayerNormChannels {
        input: Var,
        weight: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2NormalizeLast {
        input: Var,
        norms: Vec<T>,
        eps: T,
    },
    Bmm {
        a: Var,
        b: Var,
        geom: MatmulGeom,
    },
    DiffX(Var),
    DiffY(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

impl<T> Node<T> {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

/// Computation tape. Single-threaded; kernels parallelise internally.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

// tanh approximation of GELU and its derivative
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl Fn(usize) -> T) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    for (i, v) in buf.iter_mut().enumerate() {
        *v += f(i);
    }
}

fn add_vec<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn scatter<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, map: Option<&Vec<usize>>, g: impl Fn(usize) -> T, count: usize) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    match map {
        None => buf.iter_mut().enumerate().for_each(|(i, v)| *v += g(i)),
        Some(m) => (0..count).for_each(|i| buf[m[i]] += g(i)),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { shape, value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, grad: None, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; gradients accumulate into it across `backward` calls.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf_raw(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.leaf_raw(shape, t.into_data(), false)
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.leaf_raw(shape, value, false)
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn value(&self, x: Var) -> &[T] {
        &self.nodes[x.0].value
    }

    pub fn tensor(&self, x: Var) -> Tensor<T> {
        let n = &self.nodes[x.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, x: Var) -> T {
        self.nodes[x.0].value[0]
    }

    pub fn grad(&self, x: Var) -> Option<&[T]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].needs_grad
    }

    /// Zeroes every gradient buffer, including leaves.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let out = kernels::broadcast_shape(&sa, &sb)?;
        let a_map = (sa != out).then(|| kernels::broadcast_index(&out, &sa));
        let b_map = (sb != out).then(|| kernels::broadcast_index(&out, &sb));
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let n = numel(&out);
        let value: Vec<T> = match (&a_map, &b_map) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (Some(m), None) => (0..n).map(|i| f(va[m[i]], vb[i])).collect(),
            (None, Some(m)) => (0..n).map(|i| f(va[i], vb[m[i]])).collect(),
            (Some(ma), Some(mb)) => (0..n).map(|i| f(va[ma[i]], vb[mb[i]])).collect(),
        };
        Ok(self.push(out, value, Op::Binary { kind, a, b, a_map, b_map }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product; a size-1 axis broadcasts (e.g. `L` against `R`).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let n = &self.nodes[x.0];
        let shape = n.shape.clone();
        let value = n.value.iter().map(|&v| f(v)).collect();
        self.push(shape, value, op, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::MulScalar(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `max(x, s)`; the gradient is zero wherever `x <= s`.
    pub fn max_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::MaxScalar(x, s), |v| v.max(s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.max_scalar(x, T::zero())
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu(v).0)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        let &d = n.shape.last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        if d == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let shape = n.shape.clone();
        let mut value = n.value.clone();
        for row in value.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(shape, value, Op::SoftmaxLast(x), &[x]))
    }

    /// Zero-padded cross-correlation, `input: B×Cin×H×W`, `weight: Cout×(Cin/groups)×kh×kw`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(&self.nodes[input.0].shape, &self.nodes[weight.0].shape, stride, padding, groups)?;
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [geom.cout] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.nodes[b.0].shape, geom.cout
                )));
            }
        }
        let value = kernels::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| self.nodes[b.0].value.as_slice()),
            &geom,
        );
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(geom.out_shape(), value, Op::Conv2d { input, weight, bias, geom }, &parents))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        if n.value.is_empty() {
            return Err(Error::shape("sum of an empty tensor"));
        }
        let s = n.value.iter().copied().sum::<T>();
        Ok(self.push(Vec::new(), vec![s], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        if n.value.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = n.value.iter().copied().sum::<T>() / T::of(n.value.len() as f64);
        Ok(self.push(Vec::new(), vec![s], Op::Mean(x), &[x]))
    }

    /// Maximum over axis 1 of a `B×C×H×W` tensor; ties go to the lowest channel.
    pub fn max_over_channel(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        let [b, c, h, w] = n.shape[..] else {
            return Err(Error::shape(format!("max_over_channel expects rank 4, got {:?}", n.shape)));
        };
        if c == 0 {
            return Err(Error::shape("max_over_channel over zero channels"));
        }
        let hw = h * w;
        let mut value = Vec::with_capacity(b * hw);
        let mut argmax = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for p in 0..hw {
                let mut best = bi * c * hw + p;
                for ci in 1..c {
                    let idx = (bi * c + ci) * hw + p;
                    if n.value[idx] > n.value[best] {
                        best = idx;
                    }
                }
                value.push(n.value[best]);
                argmax.push(best);
            }
        }
        Ok(self.push(vec![b, 1, h, w], value, Op::MaxOverChannel { input: x, argmax }, &[x]))
    }

    /// Concatenation along axis 1 of rank-4 tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let [b, _, h, w] = self.nodes[first.0].shape[..] else {
            return Err(Error::shape("concat_channels expects rank-4 tensors"));
        };
        let mut c_total = 0;
        for x in xs {
            match self.nodes[x.0].shape[..] {
                [bb, c, hh, ww] if bb == b && hh == h && ww == w => c_total += c,
                _ => {
                    return Err(Error::shape(format!(
                        "concat_channels shape mismatch: {:?} vs {:?}",
                        self.nodes[first.0].shape, self.nodes[x.0].shape
                    )))
                }
            }
        }
        let mut value = Vec::with_capacity(b * c_total * h * w);
        for bi in 0..b {
            for x in xs {
                let n = &self.nodes[x.0];
                let item = n.shape[1] * h * w;
                value.extend_from_slice(&n.value[bi * item..(bi + 1) * item]);
            }
        }
        Ok(self.push(vec![b, c_total, h, w], value, Op::ConcatChannels(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if numel(shape) != n.value.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", n.shape, shape)));
        }
        let value = n.value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Per-pixel normalisation over the channel axis of `B×C×H×W`, with affine `weight`/`bias` of shape `[C]`.
    pub fn layer_norm_channels(&mut self, x: Var, weight: Var, bias: Var, eps: T) -> Result<Var> {
        let n = &self.nodes[x.0];
        let [b, c, h, w] = n.shape[..] else {
            return Err(Error::shape(format!("layer_norm_channels expects rank 4, got {:?}", n.shape)));
        };
        if self.nodes[weight.0].shape != [c] || self.nodes[bias.0].shape != [c] {
            return Err(Error::shape("layer norm affine parameters must have shape [C]"));
        }
        let hw = h * w;
        let cn = T::of(c as f64);
        let (wv, bv) = (&self.nodes[weight.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![T::zero(); n.value.len()];
        let mut inv_std = vec![T::zero(); b * hw];
        let mut value = vec![T::zero(); n.value.len()];
        for bi in 0..b {
            for p in 0..hw {
                let idx = |ci: usize| (bi * c + ci) * hw + p;
                let mu = (0..c).map(|ci| n.value[idx(ci)]).sum::<T>() / cn;
                let var = (0..c).map(|ci| (n.value[idx(ci)] - mu).powi(2)).sum::<T>() / cn;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[bi * hw + p] = inv;
                for ci in 0..c {
                    let xh = (n.value[idx(ci)] - mu) * inv;
                    xhat[idx(ci)] = xh;
                    value[idx(ci)] = xh * wv[ci] + bv[ci];
                }
            }
        }
        let shape = n.shape.clone();
        Ok(self.push(
            shape,
            value,
            Op::LayerNormChannels { input: x, weight, bias, xhat, inv_std },
            &[x, weight, bias],
        ))
    }

    /// `x / max(‖x‖₂, eps)` along the last axis.
    pub fn l2_normalize_last(&mut self, x: Var, eps: T) -> Result<Var> {
        let n = &self.nodes[x.0];
        let &d = n.shape.last().ok_or_else(|| Error::shape("l2 normalize of a scalar"))?;
        let mut norms = Vec::with_capacity(n.value.len() / d.max(1));
        let mut value = n.value.clone();
        for row in value.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(norm);
            let den = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= den);
        }
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::L2NormalizeLast { input: x, norms, eps }, &[x]))
    }

    /// Batched matrix product over the last two axes, optionally transposing `b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let geom = MatmulGeom::new(sa, sb, transpose_b)?;
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([geom.m, geom.n]);
        let value = kernels::bmm_forward(&self.nodes[a.0].value, &self.nodes[b.0].value, &geom);
        Ok(self.push(shape, value, Op::Bmm { a, b, geom }, &[a, b]))
    }

    /// Horizontal forward difference over the last axis, zero in the last column.
    pub fn diff_x(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        if n.shape.len() < 2 {
            return Err(Error::shape("diff_x needs at least two axes"));
        }
        let w = n.shape[n.shape.len() - 1];
        let mut value = vec![T::zero(); n.value.len()];
        for (src, dst) in n.value.chunks(w).zip(value.chunks_mut(w)) {
            for i in 0..w.saturating_sub(1) {
                dst[i] = src[i + 1] - src[i];
            }
        }
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::DiffX(x), &[x]))
    }

    /// Vertical forward difference over the second-to-last axis, zero in the last row.
    pub fn diff_y(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        let r = n.shape.len();
        if r < 2 {
            return Err(Error::shape("diff_y needs at least two axes"));
        }
        let (h, w) = (n.shape[r - 2], n.shape[r - 1]);
        let mut value = vec![T::zero(); n.value.len()];
        for (src, dst) in n.value.chunks(h * w).zip(value.chunks_mut(h * w)) {
            for y in 0..h.saturating_sub(1) {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y + 1) * w + xx] - src[y * w + xx];
                }
            }
        }
        let shape = n.shape.clone();
        Ok(self.push(shape, value, Op::DiffY(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Interior gradients are recomputed on every call; leaf gradients
    /// accumulate, so two calls without [`Graph::zero_grad`] double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in self.nodes.iter_mut().filter(|n| !n.is_leaf()) {
            n.grad = None;
        }
        add_vec(&mut self.nodes[loss.0].grad, &[T::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad || node.is_leaf() {
                continue;
            }
            let Some(g) = node.grad.as_deref() else { continue };
            backprop_node(before, node, g);
        }
        Ok(())
    }
}

/// Pushes the output gradient `g` of `node` into its parents (all of which live in `before`).
fn backprop_node<T: Scalar>(before: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let len = g.len();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, a_map, b_map } => {
            let (ia, ib) = (a.0, b.0);
            let va: Vec<T>;
            let vb: Vec<T>;
            // operand values gathered to output positions when needed
            let gather = |n: &Node<T>, m: &Option<Vec<usize>>| -> Vec<T> {
                match m {
                    None => n.value.clone(),
                    Some(m) => m.iter().map(|&j| n.value[j]).collect(),
                }
            };
            match kind {
                Binary::Add | Binary::Sub => {
                    va = Vec::new();
                    vb = Vec::new();
                }
                Binary::Mul | Binary::Div => {
                    va = gather(&before[ia], a_map);
                    vb = gather(&before[ib], b_map);
                }
            }
            if before[ia].needs_grad {
                let la = before[ia].value.len();
                let f = |i: usize| match kind {
                    Binary::Add | Binary::Sub => g[i],
                    Binary::Mul => g[i] * vb[i],
                    Binary::Div => g[i] / vb[i],
                };
                scatter(&mut before[ia].grad, la, a_map.as_ref(), f, len);
            }
            if before[ib].needs_grad {
                let lb = before[ib].value.len();
                let f = |i: usize| match kind {
                    Binary::Add => g[i],
                    Binary::Sub => -g[i],
                    Binary::Mul => g[i] * va[i],
                    Binary::Div => -g[i] * va[i] / (vb[i] * vb[i]),
                };
                scatter(&mut before[ib].grad, lb, b_map.as_ref(), f, len);
            }
        }
        Op::AddScalar(x) => add_vec(&mut before[x.0].grad, g),
        Op::MulScalar(x, s) => {
            let s = *s;
            add_into(&mut before[x.0].grad, len, |i| g[i] * s);
        }
        Op::MaxScalar(x, s) => {
            let s = *s;
            let p = &mut before[x.0];
            let v = &p.value;
            let buf = p.grad.get_or_insert_with(|| vec![T::zero(); len]);
            for i in 0..len {
                if v[i] > s {
                    buf[i] += g[i];
                }
            }
        }
        Op::Abs(x) => {
            let p = &mut before[x.0];
            let v = &p.value;
            let buf = p.grad.get_or_insert_with(|| vec![T::zero(); len]);
            for i in 0..len {
                buf[i] += g[i] * sign(v[i]);
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            add_into(&mut before[x.0].grad, len, |i| g[i] * y[i] * (T::one() - y[i]));
        }
        Op::LeakyRelu(x, slope) => {
            let slope = *slope;
            let p = &mut before[x.0];
            let v = &p.value;
            let buf = p.grad.get_or_insert_with(|| vec![T::zero(); len]);
            for i in 0..len {
                buf[i] += if v[i] > T::zero() { g[i] } else { g[i] * slope };
            }
        }
        Op::Softplus(x) => {
            let p = &mut before[x.0];
            let v = &p.value;
            let buf = p.grad.get_or_insert_with(|| vec![T::zero(); len]);
            for i in 0..len {
                buf[i] += g[i] * sigmoid(v[i]);
            }
        }
        Op::Gelu(x) => {
            let p = &mut before[x.0];
            let v = &p.value;
            let buf = p.grad.get_or_insert_with(|| vec![T::zero(); len]);
            for i in 0..len {
                buf[i] += g[i] * gelu(v[i]).1;
            }
        }
        Op::SoftmaxLast(x) => {
            let d = *node.shape.last().expect("softmax has an axis");
            let y = &node.value;
            let mut dx = vec![T::zero(); len];
            for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                for j in 0..d {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            add_vec(&mut before[x.0].grad, &dx);
        }
        Op::Conv2d { input, weight, bias, geom } => {
            let need_in = before[input.0].needs_grad;
            let need_w = before[weight.0].needs_grad;
            let need_b = bias.is_some_and(|b| before[b.0].needs_grad);
            let grads = kernels::conv2d_backward(
                g,
                &before[input.0].value,
                &before[weight.0].value,
                geom,
                need_in,
                need_w,
                need_b,
            );
            if let Some(d) = grads.input {
                add_vec(&mut before[input.0].grad, &d);
            }
            if let Some(d) = grads.weight {
                add_vec(&mut before[weight.0].grad, &d);
            }
            if let (Some(d), Some(b)) = (grads.bias, bias) {
                add_vec(&mut before[b.0].grad, &d);
            }
        }
        Op::Sum(x) => {
            let n = before[x.0].value.len();
            let g0 = g[0];
            add_into(&mut before[x.0].grad, n, |_| g0);
        }
        Op::Mean(x) => {
            let n = before[x.0].value.len();
            let g0 = g[0] / T::of(n as f64);
            add_into(&mut before[x.0].grad, n, |_| g0);
        }
        Op::MaxOverChannel { input, argmax } => {
            let n = before[input.0].value.len();
            let buf = before[input.0].grad.get_or_insert_with(|| vec![T::zero(); n]);
            for (i, &j) in argmax.iter().enumerate() {
                buf[j] += g[i];
            }
        }
        Op::ConcatChannels(xs) => {
            let [b, _, h, w] = node.shape[..] else { unreachable!() };
            let hw = h * w;
            let c_total = node.shape[1];
            let mut offset = 0;
            for x in xs {
                let c = before[x.0].shape[1];
                if before[x.0].needs_grad {
                    let n = before[x.0].value.len();
                    let buf = before[x.0].grad.get_or_insert_with(|| vec![T::zero(); n]);
                    for bi in 0..b {
                        let src = &g[(bi * c_total + offset) * hw..][..c * hw];
                        let dst = &mut buf[bi * c * hw..][..c * hw];
                        dst.iter_mut().zip(src).for_each(|(a, &s)| *a += s);
                    }
                }
                offset += c;
            }
        }
        Op::Reshape(x) => add_vec(&mut before[x.0].grad, g),
        Op::LayerNormChannels { input, weight, bias, xhat, inv_std } => {
            let [b, c, h, w] = node.shape[..] else { unreachable!() };
            let hw = h * w;
            let cn = T::of(c as f64);
            if before[weight.0].needs_grad || before[bias.0].needs_grad {
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            dw[ci] += g[off + p] * xhat[off + p];
                            db[ci] += g[off + p];
                        }
                    }
                }
                if before[weight.0].needs_grad {
                    add_vec(&mut before[weight.0].grad, &dw);
                }
                if before[bias.0].needs_grad {
                    add_vec(&mut before[bias.0].grad, &db);
                }
            }
            if before[input.0].needs_grad {
                let wv = before[weight.0].value.clone();
                let mut dx = vec![T::zero(); len];
                for bi in 0..b {
                    for p in 0..hw {
                        let idx = |ci: usize| (bi * c + ci) * hw + p;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for ci in 0..c {
                            let d = g[idx(ci)] * wv[ci];
                            sum_d += d;
                            sum_dx += d * xhat[idx(ci)];
                        }
                        let inv = inv_std[bi * hw + p];
                        for ci in 0..c {
                            let d = g[idx(ci)] * wv[ci];
                            dx[idx(ci)] = inv / cn * (cn * d - sum_d - xhat[idx(ci)] * sum_dx);
                        }
                    }
                }
                add_vec(&mut before[input.0].grad, &dx);
            }
        }
        Op::L2NormalizeLast { input, norms, eps } => {
            let d = *node.shape.last().expect("normalize has an axis");
            let y = &node.value;
            let mut dx = vec![T::zero(); len];
            for (r, ((yr, gr), dr)) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                let norm = norms[r];
                if norm > *eps {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..d {
                        dr[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                } else {
                    for j in 0..d {
                        dr[j] = gr[j] / *eps;
                    }
                }
            }
            add_vec(&mut before[input.0].grad, &dx);
        }
        Op::Bmm { a, b, geom } => {
            let need_a = before[a.0].needs_grad;
            let need_b = before[b.0].needs_grad;
            let (da, db) = kernels::bmm_backward(g, &before[a.0].value, &before[b.0].value, geom, need_a, need_b);
            if let Some(d) = da {
                add_vec(&mut before[a.0].grad, &d);
            }
            if let Some(d) = db {
                add_vec(&mut before[b.0].grad, &d);
            }
        }
        Op::DiffX(x) => {
            let w = *node.shape.last().expect("rank >= 2");
            let n = before[x.0].value.len();
            let buf = before[x.0].grad.get_or_insert_with(|| vec![T::zero(); n]);
            for (gr, br) in g.chunks(w).zip(buf.chunks_mut(w)) {
                for i in 0..w.saturating_sub(1) {
                    br[i + 1] += gr[i];
                    br[i] -= gr[i];
                }
            }
        }
        Op::DiffY(x) => {
            let r = node.shape.len();
            let (h, w) = (node.shape[r - 2], node.shape[r - 1]);
            let n = before[x.0].value.len();
            let buf = before[x.0].grad.get_or_insert_with(|| vec![T::zero(); n]);
            for (gp, bp) in g.chunks(h * w).zip(buf.chunks_mut(h * w)) {
                for y in 0..h.saturating_sub(1) {
                    for xx in 0..w {
                        bp[(y + 1) * w + xx] += gp[y * w + xx];
                        bp[y * w + xx] -= gp[y * w + xx];
                    }
                }
            }
        }
    }
}
