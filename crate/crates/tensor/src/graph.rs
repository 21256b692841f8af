//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::sync::Arc;

use crate::conv::{col2im_add, conv_out_size, im2col};
use crate::real::{gemm, MatMut, MatRef, Real};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    ConcatChannels { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast { x: Var, b: Var },
    MulBroadcast { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Silu(Var),
    Square(Var),
    Abs(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, bias: Var, scale: T, probs: Tensor<T> },
    LayerNorm { x: Var, rstd: Vec<T> },
    Gather { x: Var, index: Arc<Vec<u32>> },
    Reshape(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// In-place numerically stable softmax. Separate passes keep the
/// exponential loop free of loop-carried dependencies.
fn softmax_row<T: Real>(row: &mut [T]) {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    for v in row.iter_mut() {
        *v = (*v - mx).fast_exp();
    }
    let inv = T::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Sum with eight independent accumulators.
fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().copied().sum::<T>()
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).fast_exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient (data, masks, frozen weights).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Moves a node's value out, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// 2-D convolution, NCHW input, OIkk weights, optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let direct = k == 1 && stride == 1 && pad == 0;
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
            let od = out.data_mut();
            for i in 0..n {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let src: &[T] = if direct {
                    xi
                } else {
                    im2col(xi, c, h, wd, k, stride, pad, &mut cols);
                    &cols
                };
                let yi = &mut od[i * o * hw..(i + 1) * o * hw];
                if let Some(bv) = bv {
                    for (oc, row) in yi.chunks_mut(hw).enumerate() {
                        row.fill(bv[oc]);
                    }
                }
                gemm(
                    T::one(),
                    MatRef::row_major(wv, o, ckk),
                    MatRef::row_major(src, ckk, hw),
                    if bv.is_some() { T::one() } else { T::zero() },
                    MatMut::row_major(yi, o, hw),
                );
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &parents)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        let od = out.data_mut();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    od[o] = xv[best];
                    argmax[o] = best as u32;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64_lossy(0.25);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                let (r0, r1) = (&src[2 * oy * w..], &src[(2 * oy + 1) * w..]);
                for ox in 0..wo {
                    od[plane * ho * wo + oy * wo + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
        self.push(out, Op::AvgPool2 { x }, &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[plane * 4 * h * w + y * 2 * w + xx] = xv[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2 { x }, &[x])
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 4);
        assert!(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat spatial mismatch {sa:?} {sb:?}");
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, sa[2], sa[3]], data);
        self.push(out, Op::ConcatChannels { a, b }, &[a, b])
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    fn check_trailing(&self, x: Var, b: Var) -> usize {
        let xs = self.shape(x);
        let bs = self.shape(b);
        assert!(bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs, "broadcast {bs:?} onto {xs:?}");
        bs.iter().product()
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        let inner = self.check_trailing(x, b);
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &bb) in chunk.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBroadcast { x, b }, &[x, b])
    }

    /// `x * b` where `b`'s shape equals the trailing dims of `x`.
    pub fn mul_broadcast(&mut self, x: Var, b: Var) -> Var {
        let inner = self.check_trailing(x, b);
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &bb) in chunk.iter_mut().zip(bv) {
                *o *= bb;
            }
        }
        self.push(out, Op::MulBroadcast { x, b }, &[x, b])
    }

    /// Adds `b[n, c]` to every spatial position of `x[n, c, ..]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(bs, xs[..2], "channel bias shape");
        let hw: usize = xs[2..].iter().product();
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for (plane, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bb = bv[plane];
            chunk.iter_mut().for_each(|o| *o += bb);
        }
        self.push(out, Op::AddChannelBias { x, b }, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).fast_tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// Batched matrix product of `[B, M, K]` by `[B, K, N]`, with optional
    /// transposition of either operand's trailing two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "matmul expects [B, r, c] operands");
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Tensor::zeros(&[batch, m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (sza, szb) = (sa[1] * sa[2], sb[1] * sb[2]);
        for (i, ci) in out.data_mut().chunks_mut(m * n).enumerate() {
            let ma = MatRef::row_major(&av[i * sza..(i + 1) * sza], sa[1], sa[2]);
            let mb = MatRef::row_major(&bv[i * szb..(i + 1) * szb], sb[1], sb[2]);
            let ma = if ta { ma.t() } else { ma };
            let mb = if tb { mb.t() } else { mb };
            gemm(T::one(), ma, mb, T::zero(), MatMut::row_major(ci, m, n));
        }
        self.push(out, Op::Matmul { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Fused scaled dot-product attention over a batch of `[B, T, d]`
    /// query / key / value blocks:
    /// `softmax(scale * q k^T + bias[b % Hb] + mask[b % Hm]) v`.
    ///
    /// `bias` is `[Hb, T, T]` and learnable; `mask` is a constant
    /// `[Hm, T, T]` tensor. Only the attention probabilities are retained.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Var, mask: Option<Arc<Tensor<T>>>, scale: T) -> Var {
        let qs = self.shape(q).to_vec();
        assert_eq!(qs.len(), 3, "attention expects [B, T, d]");
        assert_eq!(self.shape(k), &qs[..], "attention key shape");
        assert_eq!(self.shape(v), &qs[..], "attention value shape");
        let (nb, t, d) = (qs[0], qs[1], qs[2]);
        assert!(q != k && q != v && k != v, "attention operands must be distinct nodes");
        let bs = self.shape(bias).to_vec();
        assert!(bs.len() == 3 && bs[1] == t && bs[2] == t && nb % bs[0] == 0, "attention bias shape {bs:?}");
        if let Some(m) = &mask {
            let ms = m.shape();
            assert!(ms.len() == 3 && ms[1] == t && ms[2] == t && nb % ms[0] == 0, "attention mask shape {ms:?}");
        }
        let (qv, kv, vv, bv) = (self.value(q).data(), self.value(k).data(), self.value(v).data(), self.value(bias).data());
        let mut probs = Tensor::zeros(&[nb, t, t]);
        let mut out = Tensor::zeros(&[nb, t, d]);
        let (pd, od) = (probs.data_mut(), out.data_mut());
        for b in 0..nb {
            let p = &mut pd[b * t * t..(b + 1) * t * t];
            let (lo, hi) = (b * t * d, (b + 1) * t * d);
            gemm(
                scale,
                MatRef::row_major(&qv[lo..hi], t, d),
                MatRef::row_major(&kv[lo..hi], t, d).t(),
                T::zero(),
                MatMut::row_major(p, t, t),
            );
            let hb = b % bs[0];
            for (pv, &bb) in p.iter_mut().zip(&bv[hb * t * t..(hb + 1) * t * t]) {
                *pv += bb;
            }
            if let Some(m) = &mask {
                let hm = b % m.shape()[0];
                for (pv, &mm) in p.iter_mut().zip(&m.data()[hm * t * t..(hm + 1) * t * t]) {
                    *pv += mm;
                }
            }
            for row in p.chunks_mut(t) {
                softmax_row(row);
            }
            gemm(
                T::one(),
                MatRef::row_major(p, t, t),
                MatRef::row_major(&vv[lo..hi], t, d),
                T::zero(),
                MatMut::row_major(&mut od[lo..hi], t, d),
            );
        }
        self.push(out, Op::Attention { q, k, v, bias, scale, probs }, &[q, k, v, bias])
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let d = *self.shape(x).last().unwrap();
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let mut out = self.value(x).clone();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`; expresses permutations, window
    /// partitioning, shifts and head splits.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather shape");
        let data = index.iter().map(|&i| xv[i as usize]).collect();
        let out = Tensor::from_vec(shape, data);
        self.push(out, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let hw = os[2] * os[3];
                let ckk = c * k * k;
                let direct = k == 1 && *stride == 1 && *pad == 0;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = acc(grads, *b, &[o]).data_mut();
                        for i in 0..n {
                            for (oc, row) in gd[i * o * hw..(i + 1) * o * hw].chunks(hw).enumerate() {
                                db[oc] += row.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * hw] };
                    let mut dw = grads[w.0].take().unwrap_or_else(|| Tensor::zeros(&ws));
                    for i in 0..n {
                        let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                        let src: &[T] = if direct {
                            xi
                        } else {
                            im2col(xi, c, h, wd, k, *stride, *pad, &mut cols);
                            &cols
                        };
                        gemm(
                            T::one(),
                            MatRef::row_major(&gd[i * o * hw..(i + 1) * o * hw], o, hw),
                            MatRef::row_major(src, ckk, hw).t(),
                            T::one(),
                            MatMut::row_major(dw.data_mut(), o, ckk),
                        );
                    }
                    grads[w.0] = Some(dw);
                }
                if self.wants(*x) {
                    let mut dx = grads[x.0].take().unwrap_or_else(|| Tensor::zeros(&xs));
                    let mut dcols = vec![T::zero(); ckk * hw];
                    for i in 0..n {
                        let dxi = &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd];
                        let gi = MatRef::row_major(&gd[i * o * hw..(i + 1) * o * hw], o, hw);
                        if direct {
                            gemm(T::one(), MatRef::row_major(wv, o, ckk).t(), gi, T::one(), MatMut::row_major(dxi, ckk, hw));
                        } else {
                            gemm(
                                T::one(),
                                MatRef::row_major(wv, o, ckk).t(),
                                gi,
                                T::zero(),
                                MatMut::row_major(&mut dcols, ckk, hw),
                            );
                            col2im_add(&dcols, c, h, wd, k, *stride, *pad, dxi);
                        }
                    }
                    grads[x.0] = Some(dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, &self.shape(*x).to_vec()).data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += gd[o];
                    }
                }
            }
            Op::AvgPool2 { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::from_f64_lossy(0.25);
                    let dx = acc(grads, *x, &xs).data_mut();
                    for plane in 0..xs[0] * xs[1] {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gd[plane * ho * wo + oy * wo + ox] * quarter;
                                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    dx[plane * h * w + (2 * oy + dy) * w + 2 * ox + dxo] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2 { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let dx = acc(grads, *x, &xs).data_mut();
                    for plane in 0..xs[0] * xs[1] {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[plane * h * w + (y / 2) * w + xx / 2] += gd[plane * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                if self.wants(*a) {
                    let da = acc(grads, *a, &sa).data_mut();
                    for i in 0..n {
                        let src = &gd[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw];
                        add_into(&mut da[i * ca * hw..(i + 1) * ca * hw], src);
                    }
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, &sb).data_mut();
                    for i in 0..n {
                        let start = i * (ca + cb) * hw + ca * hw;
                        add_into(&mut db[i * cb * hw..(i + 1) * cb * hw], &gd[start..start + cb * hw]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(acc(grads, v, g.shape()).data_mut(), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.shape()).data_mut(), gd);
                }
                if self.wants(*b) {
                    for (d, &gv) in acc(grads, *b, g.shape()).data_mut().iter_mut().zip(gd) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let ov = self.value(other).data();
                        for ((d, &gv), &o) in acc(grads, v, g.shape()).data_mut().iter_mut().zip(gd).zip(ov) {
                            *d += gv * o;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    for (d, &gv) in acc(grads, *x, g.shape()).data_mut().iter_mut().zip(gd) {
                        *d += gv * *f;
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if self.wants(*x) {
                    add_into(acc(grads, *x, g.shape()).data_mut(), gd);
                }
                if self.wants(*b) {
                    let bs = self.shape(*b).to_vec();
                    let inner = bs.iter().product();
                    let db = acc(grads, *b, &bs).data_mut();
                    for chunk in gd.chunks(inner) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::MulBroadcast { x, b } => {
                let bs = self.shape(*b).to_vec();
                let inner: usize = bs.iter().product();
                let bv = self.value(*b).data();
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.shape()).data_mut();
                    for (dc, gc) in dx.chunks_mut(inner).zip(gd.chunks(inner)) {
                        for ((d, &gv), &bb) in dc.iter_mut().zip(gc).zip(bv) {
                            *d += gv * bb;
                        }
                    }
                }
                if self.wants(*b) {
                    let xv = self.value(*x).data();
                    let db = acc(grads, *b, &bs).data_mut();
                    for (gc, xc) in gd.chunks(inner).zip(xv.chunks(inner)) {
                        for ((d, &gv), &xx) in db.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xx;
                        }
                    }
                }
            }
            Op::AddChannelBias { x, b } => {
                if self.wants(*x) {
                    add_into(acc(grads, *x, g.shape()).data_mut(), gd);
                }
                if self.wants(*b) {
                    let bs = self.shape(*b).to_vec();
                    let hw: usize = g.shape()[2..].iter().product();
                    let db = acc(grads, *b, &bs).data_mut();
                    for (plane, chunk) in gd.chunks(hw).enumerate() {
                        db[plane] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Relu(x) => self.unary_grad(*x, gd, grads, |xv, _| if xv > T::zero() { T::one() } else { T::zero() }, &node.value),
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                self.unary_grad(*x, gd, grads, |xv, _| if xv > T::zero() { T::one() } else { s }, &node.value)
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                self.unary_grad(
                    *x,
                    gd,
                    grads,
                    |v, _| {
                        let th = (c * (v + a * v * v * v)).fast_tanh();
                        half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v)
                    },
                    &node.value,
                )
            }
            Op::Silu(x) => self.unary_grad(
                *x,
                gd,
                grads,
                |v, _| {
                    let s = sigmoid(v);
                    s * (T::one() + v * (T::one() - s))
                },
                &node.value,
            ),
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                self.unary_grad(*x, gd, grads, |v, _| two * v, &node.value)
            }
            Op::Abs(x) => self.unary_grad(
                *x,
                gd,
                grads,
                |v, _| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                },
                &node.value,
            ),
            Op::Matmul { a, b, ta, tb } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, n) = (node.value.shape()[1], node.value.shape()[2]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (sza, szb) = (sa[1] * sa[2], sb[1] * sb[2]);
                if self.wants(*a) {
                    let da = acc(grads, *a, &sa).data_mut();
                    for (i, gi) in gd.chunks(m * n).enumerate() {
                        let mb = MatRef::row_major(&bv[i * szb..(i + 1) * szb], sb[1], sb[2]);
                        let mb = if *tb { mb.t() } else { mb };
                        let out = MatMut::row_major(&mut da[i * sza..(i + 1) * sza], sa[1], sa[2]);
                        let out = if *ta { out.t() } else { out };
                        gemm(T::one(), MatRef::row_major(gi, m, n), mb.t(), T::one(), out);
                    }
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, &sb).data_mut();
                    for (i, gi) in gd.chunks(m * n).enumerate() {
                        let ma = MatRef::row_major(&av[i * sza..(i + 1) * sza], sa[1], sa[2]);
                        let ma = if *ta { ma.t() } else { ma };
                        let out = MatMut::row_major(&mut db[i * szb..(i + 1) * szb], sb[1], sb[2]);
                        let out = if *tb { out.t() } else { out };
                        gemm(T::one(), ma.t(), MatRef::row_major(gi, m, n), T::one(), out);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let d = *g.shape().last().unwrap();
                    let y = node.value.data();
                    let dx = acc(grads, *x, g.shape()).data_mut();
                    for ((dr, gr), yr) in dx.chunks_mut(d).zip(gd.chunks(d)).zip(y.chunks(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dd, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, bias, scale, probs } => {
                let qs = self.shape(*q).to_vec();
                let (nb, t, d) = (qs[0], qs[1], qs[2]);
                let hb = self.shape(*bias)[0];
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let pd = probs.data();
                let mut dq = self.wants(*q).then(|| grads[q.0].take().unwrap_or_else(|| Tensor::zeros(&qs)));
                let mut dk = self.wants(*k).then(|| grads[k.0].take().unwrap_or_else(|| Tensor::zeros(&qs)));
                let mut dv = self.wants(*v).then(|| grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&qs)));
                let mut db = self.wants(*bias).then(|| grads[bias.0].take().unwrap_or_else(|| Tensor::zeros(&[hb, t, t])));
                let mut ds = vec![T::zero(); t * t];
                for b in 0..nb {
                    let (lo, hi) = (b * t * d, (b + 1) * t * d);
                    let p = &pd[b * t * t..(b + 1) * t * t];
                    let go = MatRef::row_major(&gd[lo..hi], t, d);
                    if let Some(dv) = dv.as_mut() {
                        gemm(T::one(), MatRef::row_major(p, t, t).t(), go, T::one(), MatMut::row_major(&mut dv.data_mut()[lo..hi], t, d));
                    }
                    gemm(T::one(), go, MatRef::row_major(&vv[lo..hi], t, d).t(), T::zero(), MatMut::row_major(&mut ds, t, t));
                    for (dr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (x, &pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let h = b % hb;
                        for (o, &x) in db.data_mut()[h * t * t..(h + 1) * t * t].iter_mut().zip(&ds) {
                            *o += x;
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        gemm(*scale, MatRef::row_major(&ds, t, t), MatRef::row_major(&kv[lo..hi], t, d), T::one(), MatMut::row_major(&mut dq.data_mut()[lo..hi], t, d));
                    }
                    if let Some(dk) = dk.as_mut() {
                        gemm(*scale, MatRef::row_major(&ds, t, t).t(), MatRef::row_major(&qv[lo..hi], t, d), T::one(), MatMut::row_major(&mut dk.data_mut()[lo..hi], t, d));
                    }
                }
                for (var, gr) in [(*q, dq), (*k, dk), (*v, dv), (*bias, db)] {
                    if let Some(gr) = gr {
                        grads[var.0] = Some(gr);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.wants(*x) {
                    let d = *g.shape().last().unwrap();
                    let dn = T::from_usize(d).unwrap();
                    let y = node.value.data();
                    let dx = acc(grads, *x, g.shape()).data_mut();
                    for (((dr, gr), yr), &r) in dx.chunks_mut(d).zip(gd.chunks(d)).zip(y.chunks(d)).zip(rstd) {
                        let mg = gr.iter().copied().sum::<T>() / dn;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for ((dd, &gg), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dd += r * (gg - mg - yy * mgy);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, &self.shape(*x).to_vec()).data_mut();
                    for (&src, &gv) in index.iter().zip(gd) {
                        dx[src as usize] += gv;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(acc(grads, *x, &self.shape(*x).to_vec()).data_mut(), gd);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let scale = gd[0] / T::from_usize(self.value(*x).len()).unwrap();
                    for d in acc(grads, *x, &xs).data_mut() {
                        *d += scale;
                    }
                }
            }
        }
    }

    fn unary_grad(
        &self,
        x: Var,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
        deriv: impl Fn(T, T) -> T,
        out: &Tensor<T>,
    ) {
        if !self.wants(x) {
            return;
        }
        let xv = self.value(x).data();
        let dx = acc(grads, x, out.shape()).data_mut();
        for (((d, &gv), &xx), &yy) in dx.iter_mut().zip(gd).zip(xv).zip(out.data()) {
            *d += gv * deriv(xx, yy);
        }
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf handle.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
