//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! `backward` walks the tape in reverse and returns gradients for every node
//! that depends on a leaf created with `requires_grad = true`.

use super::conv::{col2im, im2col, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    MeanAll(Var),
    Expand(Var),
    AddChan(Var, Var),
    MulChan(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cin: usize,
        cout: usize,
        dims: [usize; 3],
        out: [usize; 3],
        cols: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Upsample(Var, [usize; 3]),
    MeanSpatial(Var),
    Idwt2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn spatial_dims(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        2 => [1, 1, shape[1]],
        3 => [1, shape[1], shape[2]],
        4 => [shape[1], shape[2], shape[3]],
        _ => panic!("conv input must be [C,H,W] or [C,D,H,W], got {:?}", shape),
    }
}

/// `C (m x n) = op(A) (m x k) * op(B) (k x n)`, with `A`, `B` row-major as
/// stored. `ta` means `A` is stored `k x m`.
#[allow(clippy::too_many_arguments)]
fn matmul_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256), grad_enabled: true }
    }

    /// A graph that never records backward buffers; for inference.
    pub fn inference() -> Self {
        Self { nodes: Vec::with_capacity(256), grad_enabled: false }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let ng = self.ng(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.numel(), vb.numel(), "elementwise shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s: T = v.data().iter().copied().sum();
        let m = s / T::c(v.numel() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(self.nodes[x.0].value.numel(), 1);
        let v = self.nodes[x.0].value.item();
        let ng = self.ng(x);
        self.push(Tensor::full(shape, v), Op::Expand(x), ng)
    }

    fn chan_op(&mut self, x: Var, c: Var, mul: bool) -> Var {
        let vx = &self.nodes[x.0].value;
        let vc = &self.nodes[c.0].value;
        let ch = vx.shape()[0];
        assert_eq!(vc.numel(), ch, "per-channel operand must have {} entries", ch);
        let inner = vx.numel() / ch;
        let mut out = vx.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let s = vc.data()[ci];
            if mul {
                chunk.iter_mut().for_each(|v| *v *= s);
            } else {
                chunk.iter_mut().for_each(|v| *v += s);
            }
        }
        let ng = self.ng(x) || self.ng(c);
        let op = if mul { Op::MulChan(x, c) } else { Op::AddChan(x, c) };
        self.push(out, op, ng)
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_chan(&mut self, x: Var, b: Var) -> Var {
        self.chan_op(x, b, false)
    }

    /// `x[c, ...] * s[c]`.
    pub fn mul_chan(&mut self, x: Var, s: Var) -> Var {
        self.chan_op(x, s, true)
    }

    /// Convolution of `x` (`[Cin, H, W]` or `[Cin, D, H, W]`) with weights
    /// `[Cout, Cin, k...]` and optional bias `[Cout]`. Zero padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let shape = xv.shape().to_vec();
        let cin = shape[0];
        let dims = spatial_dims(&shape);
        let kvol = spec.kernel_volume();
        let cout = wv.shape()[0];
        assert_eq!(wv.numel(), cout * cin * kvol, "conv weight {:?} vs input {:?}", wv.shape(), shape);
        let out = spec.out_dims(dims).expect("conv kernel larger than padded input");
        let p = out[0] * out[1] * out[2];
        let k = cin * kvol;
        let cols = if spec.is_pointwise() { Vec::new() } else { im2col(xv.data(), cin, dims, &spec, out) };
        let colsref: &[T] = if spec.is_pointwise() { xv.data() } else { &cols };
        let mut y = vec![T::zero(); cout * p];
        matmul_into(cout, k, p, wv.data(), false, colsref, false, &mut y, T::zero());
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            for (co, chunk) in y.chunks_mut(p).enumerate() {
                let bias = bv[co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let out_shape: Vec<usize> = match shape.len() {
            2 => vec![cout, out[2]],
            3 => vec![cout, out[1], out[2]],
            _ => vec![cout, out[0], out[1], out[2]],
        };
        let ng = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        let keep = ng && self.grad_enabled && self.ng(w);
        let op = Op::Conv { x, w, b, spec, cin, cout, dims, out, cols: if keep { cols } else { Vec::new() } };
        self.push(Tensor::from_vec(&out_shape, y).unwrap(), op, ng)
    }

    /// Group normalisation over `[C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.shape()[0];
        assert!(c % groups == 0, "channels {} not divisible by groups {}", c, groups);
        let inner = xv.numel() / c;
        let per = c / groups * inner;
        let n = T::c(per as f64);
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); groups];
        let mut y = vec![T::zero(); xv.numel()];
        for gi in 0..groups {
            let seg = &xv.data()[gi * per..(gi + 1) * per];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[gi] = r;
            for (i, &v) in seg.iter().enumerate() {
                let idx = gi * per + i;
                let h = (v - mean) * r;
                xhat[idx] = h;
                let ch = idx / inner;
                y[idx] = h * g[ch] + bt[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = xv.shape().to_vec();
        let op = Op::GroupNorm { x, gamma, beta, groups, xhat, rstd };
        self.push(Tensor::from_vec(&shape, y).unwrap(), op, ng)
    }

    /// Matrix product of 2D tensors with optional transposition of either side.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2D operands");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", sa, sb);
        let mut c = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.nodes[a.0].value.data(), ta, self.nodes[b.0].value.data(), tb, &mut c, T::zero());
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], c).unwrap(), Op::MatMul { a, b, ta, tb, m, k, n }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let cols = *xv.shape().last().unwrap();
        let mut y = xv.data().to_vec();
        for row in y.chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, y).unwrap(), Op::SoftmaxRows(x), ng)
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(&s[1..], &first[1..], "concat trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.nodes[v.0].value.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat(xs.to_vec()), ng)
    }

    /// Leading-axis slice `[start, start + len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let data = self.nodes[x.0].value.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Narrow(x, start, len), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0].value.clone().reshaped(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Nearest-neighbour upsampling of `[C, D, H, W]` (or `[C, H, W]`, with
    /// the depth factor ignored).
    pub fn upsample(&mut self, x: Var, factors: [usize; 3]) -> Var {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let dims = spatial_dims(&s);
        let f = if s.len() == 3 { [1, factors[1], factors[2]] } else { factors };
        let od = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
        let xv = self.nodes[x.0].value.data();
        let mut y = vec![T::zero(); c * od[0] * od[1] * od[2]];
        let mut i = 0;
        for ci in 0..c {
            for d in 0..od[0] {
                for h in 0..od[1] {
                    let src = ((ci * dims[0] + d / f[0]) * dims[1] + h / f[1]) * dims[2];
                    for w in 0..od[2] {
                        y[i] = xv[src + w / f[2]];
                        i += 1;
                    }
                }
            }
        }
        let shape = if s.len() == 3 { vec![c, od[1], od[2]] } else { vec![c, od[0], od[1], od[2]] };
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, y).unwrap(), Op::Upsample(x, f), ng)
    }

    /// Average over every axis but the leading one: `[C, ...] -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let c = v.shape()[0];
        let inner = v.numel() / c;
        let n = T::c(inner as f64);
        let y: Vec<T> = v.data().chunks(inner).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c], y).unwrap(), Op::MeanSpatial(x), ng)
    }

    /// Inverse orthonormal Haar transform of a `[4, h, w]` band stack into a
    /// `[2h, 2w]` image.
    pub fn idwt2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[0] == 4, "idwt2 expects [4, h, w], got {:?}", s);
        let (h, w) = (s[1], s[2]);
        let y = crate::wavelet::haar_synthesis(self.nodes[x.0].value.data(), h, w);
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[2 * h, 2 * w], y).unwrap(), Op::Idwt2(x), ng)
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(g);
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * vb[j];
                    }
                });
                self.acc(grads, *b, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * va[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] / vb[j];
                    }
                });
                self.acc(grads, *b, |g| {
                    for j in 0..g.len() {
                        g[j] -= gy[j] * y[j] / vb[j];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c)),
            Op::AddScalar(a) => self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)),
            Op::Abs(a) => {
                let x = val(*a);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        let s = if x[j] > T::zero() {
                            T::one()
                        } else if x[j] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[j] += gy[j] * s;
                    }
                })
            }
            Op::Square(a) => {
                let x = val(*a);
                let two = T::c(2.0);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * two * x[j];
                    }
                })
            }
            Op::Sqrt(a) => self.acc(grads, *a, |g| {
                // zero subgradient at the origin
                let half = T::c(0.5);
                for j in 0..g.len() {
                    if y[j] > T::zero() {
                        g[j] += gy[j] * half / y[j];
                    }
                }
            }),
            Op::Ln(a) => {
                let x = val(*a);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] / x[j];
                    }
                })
            }
            Op::Exp(a) => self.acc(grads, *a, |g| {
                for j in 0..g.len() {
                    g[j] += gy[j] * y[j];
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |g| {
                for j in 0..g.len() {
                    g[j] += gy[j] * (T::one() - y[j] * y[j]);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |g| {
                for j in 0..g.len() {
                    g[j] += gy[j] * y[j] * (T::one() - y[j]);
                }
            }),
            Op::Silu(a) => {
                let x = val(*a);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        let s = sigmoid(x[j]);
                        g[j] += gy[j] * s * (T::one() + x[j] * (T::one() - s));
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(*a);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        if x[j] > T::zero() {
                            g[j] += gy[j];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                self.acc(grads, *a, |g| {
                    for j in 0..g.len() {
                        if x[j] >= *lo && x[j] <= *hi {
                            g[j] += gy[j];
                        }
                    }
                })
            }
            Op::SumAll(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += gy[0])),
            Op::MeanAll(a) => {
                let d = gy[0] / T::c(self.nodes[a.0].value.numel() as f64);
                self.acc(grads, *a, |g| g.iter_mut().for_each(|g| *g += d))
            }
            Op::Expand(a) => {
                let s: T = gy.iter().copied().sum();
                self.acc(grads, *a, |g| g[0] += s)
            }
            Op::AddChan(x, b) => {
                self.acc(grads, *x, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                let c = self.nodes[b.0].value.numel();
                let inner = gy.len() / c;
                self.acc(grads, *b, |g| {
                    for (ci, chunk) in gy.chunks(inner).enumerate() {
                        g[ci] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::MulChan(x, s) => {
                let sv = val(*s);
                let xv = val(*x);
                let c = sv.len();
                let inner = gy.len() / c;
                self.acc(grads, *x, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * sv[j / inner];
                    }
                });
                self.acc(grads, *s, |g| {
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for j in ci * inner..(ci + 1) * inner {
                            acc += gy[j] * xv[j];
                        }
                        g[ci] += acc;
                    }
                });
            }
            Op::Conv { x, w, b, spec, cin, cout, dims, out, cols } => {
                let p = out[0] * out[1] * out[2];
                let k = cin * spec.kernel_volume();
                if let Some(b) = b {
                    self.acc(grads, *b, |g| {
                        for (co, chunk) in gy.chunks(p).enumerate() {
                            g[co] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
                if self.nodes[w.0].needs_grad {
                    let colsref: &[T] = if spec.is_pointwise() { val(*x) } else { cols };
                    self.acc(grads, *w, |g| {
                        // dW (cout x k) += dY (cout x p) * cols^T (p x k)
                        matmul_into(*cout, p, k, gy, false, colsref, true, g, T::one());
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let wv = val(*w);
                    if spec.is_pointwise() {
                        self.acc(grads, *x, |g| matmul_into(k, *cout, p, wv, true, gy, false, g, T::one()));
                    } else {
                        let mut dcols = vec![T::zero(); k * p];
                        matmul_into(k, *cout, p, wv, true, gy, false, &mut dcols, T::zero());
                        self.acc(grads, *x, |g| col2im(&dcols, *cin, *dims, spec, *out, g));
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let c = self.nodes[gamma.0].value.numel();
                let inner = gy.len() / c;
                let gv = val(*gamma);
                self.acc(grads, *gamma, |g| {
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for j in ci * inner..(ci + 1) * inner {
                            acc += gy[j] * xhat[j];
                        }
                        g[ci] += acc;
                    }
                });
                self.acc(grads, *beta, |g| {
                    for ci in 0..c {
                        g[ci] += gy[ci * inner..(ci + 1) * inner].iter().copied().sum::<T>();
                    }
                });
                let per = gy.len() / groups;
                let n = T::c(per as f64);
                self.acc(grads, *x, |g| {
                    for gi in 0..*groups {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in gi * per..(gi + 1) * per {
                            let dh = gy[j] * gv[j / inner];
                            s1 += dh;
                            s2 += dh * xhat[j];
                        }
                        for j in gi * per..(gi + 1) * per {
                            let dh = gy[j] * gv[j / inner];
                            g[j] += rstd[gi] * (dh - (s1 + xhat[j] * s2) / n);
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                // C = op(A) op(B); dop(A) = dC op(B)^T, dop(B) = op(A)^T dC
                self.acc(grads, *a, |g| {
                    if *ta {
                        // A stored k x m: dA = op(B) dC^T
                        matmul_into(*k, *n, *m, vb, *tb, gy, true, g, T::one());
                    } else {
                        matmul_into(*m, *n, *k, gy, false, vb, !*tb, g, T::one());
                    }
                });
                self.acc(grads, *b, |g| {
                    if *tb {
                        // B stored n x k: dB = dC^T op(A)
                        matmul_into(*n, *m, *k, gy, true, va, *ta, g, T::one());
                    } else {
                        matmul_into(*k, *m, *n, va, !*ta, gy, false, g, T::one());
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let cols = *node.value.shape().last().unwrap();
                self.acc(grads, *a, |g| {
                    for r in 0..gy.len() / cols {
                        let rng = r * cols..(r + 1) * cols;
                        let dot: T = gy[rng.clone()].iter().zip(&y[rng.clone()]).map(|(&d, &s)| d * s).sum();
                        for j in rng {
                            g[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.numel();
                    let seg = &gy[off..off + len];
                    self.acc(grads, v, |g| g.iter_mut().zip(seg).for_each(|(g, &d)| *g += d));
                    off += len;
                }
            }
            Op::Narrow(a, start, _len) => {
                let s = self.nodes[a.0].value.shape();
                let inner: usize = s[1..].iter().product();
                let off = start * inner;
                self.acc(grads, *a, |g| {
                    g[off..off + gy.len()].iter_mut().zip(gy).for_each(|(g, &d)| *g += d)
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d)),
            Op::Upsample(a, f) => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let c = s[0];
                let dims = spatial_dims(&s);
                let od = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
                self.acc(grads, *a, |g| {
                    let mut i = 0;
                    for ci in 0..c {
                        for d in 0..od[0] {
                            for h in 0..od[1] {
                                let src = ((ci * dims[0] + d / f[0]) * dims[1] + h / f[1]) * dims[2];
                                for w in 0..od[2] {
                                    g[src + w / f[2]] += gy[i];
                                    i += 1;
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanSpatial(a) => {
                let c = gy.len();
                let inner = self.nodes[a.0].value.numel() / c;
                let n = T::c(inner as f64);
                self.acc(grads, *a, |g| {
                    for (j, gv) in g.iter_mut().enumerate() {
                        *gv += gy[j / inner] / n;
                    }
                });
            }
            Op::Idwt2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (h, w) = (s[1], s[2]);
                // orthonormal: adjoint of synthesis is analysis
                let d = crate::wavelet::haar_analysis(gy, 2 * h, 2 * w);
                self.acc(grads, *a, |g| g.iter_mut().zip(&d).for_each(|(g, &v)| *g += v));
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
