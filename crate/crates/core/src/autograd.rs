//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse. Parameters enter the tape as [`Op::Param`]
//! leaves so their gradients can be collected by id afterwards.

use crate::nn::{ParamId, ParamStore};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::ops::norm::{batch_stats, norm_backward, normalize, running_stats, NormStats};
use crate::ops::{pool, sample};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running estimates are updated.
    Train,
    /// Running statistics; the pass has no side effects on the model.
    Eval,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Norm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample2(Var),
    AdaptivePool(Var),
    Reshape(Var),
    Transpose12(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchMatmul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Warp { x: Var, disp: Var },
    GatedFuse { a: Var, b: Var, gate: Var, residual: Var },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by one normalization layer during a training pass.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    norm_updates: Vec<NormUpdate<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), mode, norm_updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn norm_updates(&self) -> &[NormUpdate<T>] {
        &self.norm_updates
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), &[])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec);
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(y, Op::Conv { x, w, b, spec }, &ins)
    }

    /// Per-channel normalization. In [`Mode::Train`] batch statistics are used
    /// and queued as a [`NormUpdate`]; in [`Mode::Eval`] the running estimates are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        let stats = match self.mode {
            Mode::Train => {
                let s = batch_stats(self.value(x), eps);
                self.norm_updates.push(NormUpdate {
                    running_mean,
                    running_var,
                    mean: s.mean.clone(),
                    var: s.batch_var.clone().unwrap_or_default(),
                });
                s
            }
            Mode::Eval => running_stats(store.get(running_mean).data(), store.get(running_var).data(), eps),
        };
        let y = normalize(self.value(x), self.value(gamma).data(), self.value(beta).data(), &stats);
        self.push(y, Op::Norm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        self.push(y, Op::Tanh(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine { x, scale }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", s, first);
            }
            out_shape[axis] += s[axis];
        }
        let (outer, total, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let (_, len, _) = split_axis(self.shape(p), axis);
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let y = Tensor::from_vec(&out_shape, out);
        self.push(y, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        assert!(start + len <= dim, "narrow out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let y = Tensor::from_vec(&out_shape, out);
        self.push(y, Op::Narrow { x, axis, start }, &[x])
    }

    /// Splits `x` along `axis` into `n` equal chunks.
    pub fn chunk(&mut self, x: Var, axis: usize, n: usize) -> Vec<Var> {
        let dim = self.shape(x)[axis];
        assert!(dim % n == 0, "chunk: {} not divisible by {}", dim, n);
        let len = dim / n;
        (0..n).map(|i| self.narrow(x, axis, i * len, len)).collect()
    }

    pub fn max_pool_same(&mut self, x: Var, kernel: usize) -> Var {
        let (y, arg) = pool::max_pool_same(self.value(x), kernel);
        self.push(y, Op::MaxPool { x, arg }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = pool::upsample_nearest2(self.value(x));
        self.push(y, Op::Upsample2(x), &[x])
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let y = pool::adaptive_avg_pool(self.value(x), oh, ow);
        self.push(y, Op::AdaptivePool(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshaped(shape);
        self.push(y, Op::Reshape(x), &[x])
    }

    /// `(B, M, N) -> (B, N, M)`.
    pub fn transpose12(&mut self, x: Var) -> Var {
        let y = transpose12(self.value(x));
        self.push(y, Op::Transpose12(x), &[x])
    }

    /// `x (..., in) @ w (out, in)^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let (out_f, in_f) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(*xs.last().expect("rank ≥ 1"), in_f, "linear: feature mismatch");
        let rows = self.value(x).numel() / in_f;
        let mut y = vec![T::zero(); rows * out_f];
        gemm(false, true, rows, out_f, in_f, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut y);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for o in 0..out_f {
                    y[r * out_f + o] = y[r * out_f + o] + bd[o];
                }
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().expect("rank ≥ 1") = out_f;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Tensor::from_vec(&out_shape, y), Op::Linear { x, w, b }, &ins)
    }

    /// Batched `(B, m, k) @ (B, k, n)`, or `@ (B, n, k)^T` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul shapes {:?} {:?}", sa, sb);
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "batch_matmul inner dim");
        let mut y = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                false,
                trans_b,
                m,
                n,
                k,
                T::one(),
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut y[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::from_vec(&[bs, m, n], y), Op::BatchMatmul { a, b, trans_b }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("rank ≥ 1");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let y = Tensor::from_vec(xv.shape(), out);
        self.push(y, Op::Softmax(x), &[x])
    }

    pub fn grouped_warp(&mut self, x: Var, disp: Var) -> Var {
        let y = sample::grouped_warp(self.value(x), self.value(disp));
        self.push(y, Op::Warp { x, disp }, &[x, disp])
    }

    /// `residual + gate ⊙ a + (1 − gate) ⊙ b`, with `gate` of shape `(B,1,H,W)`
    /// broadcast over channels.
    pub fn gated_fuse(&mut self, a: Var, b: Var, gate: Var, residual: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        assert_eq!(self.shape(b), self.shape(a), "gated_fuse: a/b shape mismatch");
        assert_eq!(self.shape(residual), self.shape(a), "gated_fuse: residual shape mismatch");
        assert_eq!(self.shape(gate), &[n, 1, h, w], "gated_fuse: gate must be (B,1,H,W)");
        let (ad, bd, gd, rd) =
            (self.value(a).data(), self.value(b).data(), self.value(gate).data(), self.value(residual).data());
        let y = Tensor::from_fn(&[n, c, h, w], |i| {
            let p = i % (h * w);
            let bi = i / (c * h * w);
            let g = gd[bi * h * w + p];
            rd[i] + g * ad[i] + (T::one() - g) * bd[i]
        });
        self.push(y, Op::GatedFuse { a, b, gate, residual }, &[a, b, gate, residual])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass seeded with `d(loss)/d(var)` for each seed.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(*v), "seed gradient shape mismatch");
            self.accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads, params: self.param_index() }
    }

    fn param_index(&self) -> Vec<(ParamId, usize)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, spec } => {
                let cg = conv2d_backward(val(*x), val(*w), b.is_some(), g, spec, wants(*x));
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, cg.dw);
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Norm { x, gamma, beta, stats } => {
                let (dx, dg, db) = norm_backward(val(*x), val(*gamma).data(), stats, g);
                let c = dg.len();
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dg));
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], db));
            }
            Op::Silu(x) => {
                let d = val(*x).zip_map(g, |v, gy| {
                    let s = sigmoid(v);
                    gy * s * (T::one() + v * (T::one() - s))
                });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |s, gy| gy * s * (T::one() - s));
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = node.value.zip_map(g, |t, gy| gy * (T::one() - t * t));
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |gy, q| gy * q));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |gy, p| gy * p));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let len = ps[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&ps, d));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape().to_vec();
                let (outer, dim, inner) = split_axis(&xs, *axis);
                let len = node.value.shape()[*axis];
                let mut d = Tensor::zeros(&xs);
                for o in 0..outer {
                    d.data_mut()[(o * dim + start) * inner..(o * dim + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool { x, arg } => {
                self.accumulate(grads, *x, pool::max_pool_backward(val(*x).shape(), arg, g));
            }
            Op::Upsample2(x) => self.accumulate(grads, *x, pool::upsample_nearest2_backward(g)),
            Op::AdaptivePool(x) => {
                self.accumulate(grads, *x, pool::adaptive_avg_pool_backward(val(*x).shape(), g));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone().reshaped(val(*x).shape())),
            Op::Transpose12(x) => self.accumulate(grads, *x, transpose12(g)),
            Op::Linear { x, w, b } => {
                let (out_f, in_f) = (val(*w).shape()[0], val(*w).shape()[1]);
                let rows = val(*x).numel() / in_f;
                if wants(*x) {
                    let mut dx = vec![T::zero(); rows * in_f];
                    gemm(false, false, rows, in_f, out_f, T::one(), g.data(), val(*w).data(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(val(*x).shape(), dx));
                }
                let mut dw = vec![T::zero(); out_f * in_f];
                gemm(true, false, out_f, in_f, rows, T::one(), g.data(), val(*x).data(), T::zero(), &mut dw);
                self.accumulate(grads, *w, Tensor::from_vec(&[out_f, in_f], dw));
                if let Some(b) = b {
                    let mut db = vec![T::zero(); out_f];
                    for r in 0..rows {
                        for o in 0..out_f {
                            db[o] = db[o] + g.data()[r * out_f + o];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[out_f], db));
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let sa = val(*a).shape().to_vec();
                let sb = val(*b).shape().to_vec();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd, gd) = (val(*a).data(), val(*b).data(), g.data());
                if wants(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        let (bi, gi) = (&bd[i * k * n..(i + 1) * k * n], &gd[i * m * n..(i + 1) * m * n]);
                        // trans_b: b is (n,k) and da = g @ b; otherwise b is (k,n) and da = g @ b^T.
                        gemm(false, !*trans_b, m, k, n, T::one(), gi, bi, T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(&sa, da));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let (ai, gi) = (&ad[i * m * k..(i + 1) * m * k], &gd[i * m * n..(i + 1) * m * n]);
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(true, false, n, k, m, T::one(), gi, ai, T::zero(), dst);
                        } else {
                            gemm(true, false, k, n, m, T::one(), ai, gi, T::zero(), dst);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&sb, db));
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("rank ≥ 1");
                let mut d = g.data().to_vec();
                for (drow, yrow) in d.chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), d));
            }
            Op::Warp { x, disp } => {
                let (dx, dd) = sample::grouped_warp_backward(val(*x), val(*disp), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *disp, dd);
            }
            Op::GatedFuse { a, b, gate, residual } => {
                let (n, c, h, w) = g.dims4();
                let (ad, bd, gd) = (val(*a).data(), val(*b).data(), val(*gate).data());
                let gy = g.data();
                let da = Tensor::from_fn(&[n, c, h, w], |i| gy[i] * gd[(i / (c * h * w)) * h * w + i % (h * w)]);
                let db = Tensor::from_fn(&[n, c, h, w], |i| {
                    gy[i] * (T::one() - gd[(i / (c * h * w)) * h * w + i % (h * w)])
                });
                let mut dg = Tensor::zeros(&[n, 1, h, w]);
                for i in 0..gy.len() {
                    let j = (i / (c * h * w)) * h * w + i % (h * w);
                    dg.data_mut()[j] = dg.data()[j] + gy[i] * (ad[i] - bd[i]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
                self.accumulate(grads, *gate, dg);
                self.accumulate(grads, *residual, g.clone());
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), s));
            }
        }
    }
}

fn transpose12<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 3, "transpose12 expects rank 3");
    let (b, m, n) = (s[0], s[1], s[2]);
    let d = x.data();
    Tensor::from_fn(&[b, n, m], |i| {
        let j = i % m;
        let k = (i / m) % n;
        let bi = i / (m * n);
        d[(bi * m + j) * n + k]
    })
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf (input or parameter node).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, summed over every appearance of the parameter in the tape.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
