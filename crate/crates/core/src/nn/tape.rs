//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every primitive appends one node to the [`Tape`]. A node whose inputs
//! all lack `requires_grad` is stored as a constant, so inference passes
//! never pay for backward bookkeeping. Nodes are appended in evaluation
//! order, which makes the node vector itself a topological order.

use crate::error::{shape_err, Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Reshape(Var),
    Permute { input: Var, perm: Vec<usize> },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    Pick { input: Var, index: usize },
    /// Scalar-valued fused op with precomputed partials per input.
    Fused { inputs: Vec<Var>, partials: Vec<Tensor<S>> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    leaf_grads: Vec<Option<Tensor<S>>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[i, j] += sum_p a[i, p] * b[j, p]`
fn matmul_t_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[p, j] += sum_i a[i, p] * b[i, j]`
fn matmul_tn_kernel<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn softmax_rows<S: Scalar>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

fn log_softmax_rows<S: Scalar>(x: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(S::neg_infinity(), S::max);
        let total: S = src.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + total.ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Tensor<S> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![S::zero(); cout * h * w];
    for co in 0..cout {
        let oplane = &mut out[co * h * w..(co + 1) * h * w];
        if let Some(b) = bias {
            oplane.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        for ci in 0..cin {
            let iplane = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                // output rows oy with 0 <= oy + ky - pt < h
                let oy_lo = pt.saturating_sub(ky);
                let oy_hi = (h + pt).saturating_sub(ky).min(h);
                for kx in 0..kw {
                    let wv = kd[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    let ox_lo = pl.saturating_sub(kx);
                    let ox_hi = (w + pl).saturating_sub(kx).min(w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pt;
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        let orow = &mut oplane[oy * w..(oy + 1) * w];
                        let ix0 = ox_lo + kx - pl;
                        for (o, &iv) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..]) {
                            *o += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![cout, h, w], out)
}

/// Returns gradients with respect to input, kernel and bias.
fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    g: &Tensor<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let kd = k.data();
    let gd = g.data();
    let mut gx = vec![S::zero(); xd.len()];
    let mut gk = vec![S::zero(); kd.len()];
    let mut gb = vec![S::zero(); cout];
    for co in 0..cout {
        let gplane = &gd[co * h * w..(co + 1) * h * w];
        gb[co] = gplane.iter().copied().sum();
        for ci in 0..cin {
            let iplane = &xd[ci * h * w..(ci + 1) * h * w];
            let gxplane = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let oy_lo = pt.saturating_sub(ky);
                let oy_hi = (h + pt).saturating_sub(ky).min(h);
                for kx in 0..kw {
                    let ox_lo = pl.saturating_sub(kx);
                    let ox_hi = (w + pl).saturating_sub(kx).min(w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                    let wv = kd[widx];
                    let mut acc = S::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pt;
                        let ix0 = ox_lo + kx - pl;
                        let grow = &gplane[oy * w + ox_lo..oy * w + ox_hi];
                        let irow = &iplane[iy * w + ix0..];
                        for (&gv, &iv) in grow.iter().zip(irow) {
                            acc += gv * iv;
                        }
                        let gxrow = &mut gxplane[iy * w + ix0..];
                        for (gxv, &gv) in gxrow.iter_mut().zip(grow) {
                            *gxv += gv * wv;
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    (gx, gk, gb)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node at index `len` or later.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn map_unary(&mut self, v: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let out = self.value(v).map(f);
        self.push(out, op, &[v])
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]"));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`; the layout of `out x in` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_t")?;
        let (n, k2) = self.value(b).dims2("matmul_t")?;
        if k != k2 {
            return shape_err("matmul_t", format!("[{m}, {k}] x [{n}, {k2}]^T"));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_t_kernel(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims2("transpose")?;
        let (shape, data) = permute_data(self.value(a).data(), self.value(a).shape(), &[1, 0]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` row (`[n]` or `[1, n]`) to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(row).len() != n {
            return shape_err(
                "add_row",
                format!("[{m}, {n}] + row {:?}", self.value(row).shape()),
            );
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &rv) in chunk.iter_mut().zip(r) {
                *d += rv;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: S) -> Var {
        self.map_unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), |x| S::one() / (S::one() + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Log(a), |x| x.ln())
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = softmax_rows(t.data(), last_axis(t.shape()));
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = log_softmax_rows(t.data(), last_axis(t.shape()));
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err("concat", format!("{base:?} vs {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Row `i` of a rank-2 tensor as `[1, n]`.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, 0, i, 1)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.value(a).shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return shape_err("permute", format!("{perm:?} for {shape:?}"));
        }
        let (s, d) = permute_data(self.value(a).data(), shape, perm);
        let out = Tensor::from_parts(s, d);
        Ok(self.push(out, Op::Permute { input: a, perm: perm.to_vec() }, &[a]))
    }

    /// 2x2 max pooling with stride 2 over `[C, H, W]`. Odd extents are
    /// padded, so the output is `[C, ceil(H/2), ceil(W/2)]`.
    pub fn max_pool2d(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [c, h, w] = t.shape()[..] else {
            return shape_err("max_pool2d", format!("expected [C, H, W], got {:?}", t.shape()));
        };
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = t.data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for iy in 2 * oy..(2 * oy + 2).min(h) {
                        for ix in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = (ch * h + iy) * w + ix;
                            if best == usize::MAX || x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![c, oh, ow], data);
        Ok(self.push(out, Op::MaxPool2d { input: a, argmax }, &[a]))
    }

    /// Stride-1 convolution with "same" padding.
    ///
    /// `input: [Cin, H, W]`, `kernel: [Cout, Cin, KH, KW]`, `bias: [Cout]`.
    /// Padding before each axis is `(K - 1) / 2`, the remainder goes after,
    /// so even kernel widths are supported.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape();
        let ks = self.value(kernel).shape();
        let ok = xs.len() == 3 && ks.len() == 4 && ks[1] == xs[0];
        if !ok {
            return shape_err("conv2d", format!("input {xs:?} with kernel {ks:?}"));
        }
        if let Some(b) = bias {
            if self.value(b).len() != ks[0] {
                return shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.value(b).shape(), ks[0]),
                );
            }
        }
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        );
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias }, &parents))
    }

    /// Element at flat index `index`, as a rank-0 tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return shape_err("pick", format!("index {index} in {:?}", t.shape()));
        }
        let v = t.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { input: a, index }, &[a]))
    }

    /// Records a scalar function of `inputs` whose partial derivatives were
    /// computed alongside its value.
    pub fn fused_scalar(&mut self, value: S, inputs: &[Var], partials: Vec<Tensor<S>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return shape_err("fused", "one partial per input required");
        }
        for (&i, p) in inputs.iter().zip(&partials) {
            if self.value(i).shape() != p.shape() {
                return shape_err(
                    "fused",
                    format!("partial {:?} for input {:?}", p.shape(), self.value(i).shape()),
                );
            }
        }
        let op = Op::Fused { inputs: inputs.to_vec(), partials };
        Ok(self.push(Tensor::scalar(value), op, inputs))
    }

    /// Accumulates d`loss`/d`leaf` into every reachable leaf that requires
    /// gradients. Calling it twice without [`Tape::zero_grad`] adds.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, t: Tensor<S>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<S>| Tensor::from_parts(nodes[v.0].value.shape().to_vec(), data);
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if nodes[a.0].requires_grad {
                    let mut ga = vec![S::zero(); m * k];
                    matmul_t_kernel(gd, val(*b).data(), &mut ga, m, n, k);
                    send(*a, like(*a, ga));
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![S::zero(); k * n];
                    matmul_tn_kernel(val(*a).data(), gd, &mut gb, m, k, n);
                    send(*b, like(*b, gb));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                if nodes[a.0].requires_grad {
                    let mut ga = vec![S::zero(); m * k];
                    matmul_kernel(gd, val(*b).data(), &mut ga, m, n, k);
                    send(*a, like(*a, ga));
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![S::zero(); n * k];
                    matmul_tn_kernel(gd, val(*a).data(), &mut gb, m, n, k);
                    send(*b, like(*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (_, d) = permute_data(gd, g.shape(), &[1, 0]);
                send(*a, like(*a, d));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|x| -x));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let ga = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                let gb = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::AddRow(a, r) => {
                let n = val(*r).len();
                let mut gr = vec![S::zero(); n];
                for chunk in gd.chunks(n) {
                    for (acc, &v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                send(*r, like(*r, gr));
                send(*a, g);
            }
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, g.map(|x| x * c));
            }
            Op::Offset(a) => send(*a, g),
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * (S::one() - y * y)).collect();
                send(*a, like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y * (S::one() - y)).collect();
                send(*a, like(*a, d));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                    .collect();
                send(*a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                send(*a, like(*a, d));
            }
            Op::Log(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(&gv, &x)| gv / x).collect();
                send(*a, like(*a, d));
            }
            Op::Softmax(a) => {
                let cols = last_axis(out.shape());
                let mut d = vec![S::zero(); gd.len()];
                for ((gr, yr), dr) in gd.chunks(cols).zip(out.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: S = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for ((dv, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = y * (gv - dot);
                    }
                }
                send(*a, like(*a, d));
            }
            Op::LogSoftmax(a) => {
                let cols = last_axis(out.shape());
                let mut d = vec![S::zero(); gd.len()];
                for ((gr, yr), dr) in gd.chunks(cols).zip(out.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                    let total: S = gr.iter().copied().sum();
                    for ((dv, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - y.exp() * total;
                    }
                }
                send(*a, like(*a, d));
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = val(p).shape()[*axis] * inner;
                    if nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&gd[base..base + block]);
                        }
                        send(p, like(p, d));
                    }
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                let (outer, inner) = outer_inner(shape, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![S::zero(); val(*input).len()];
                for o in 0..outer {
                    let base = (o * shape[*axis] + start) * inner;
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    for (dv, &gv) in d[base..base + len * inner].iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
                send(*input, like(*input, d));
            }
            Op::Sum(a) => {
                let gv = gd[0];
                send(*a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Reshape(a) => send(*a, like(*a, g.into_data())),
            Op::Permute { input, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, d) = permute_data(gd, g.shape(), &inv);
                send(*input, like(*input, d));
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![S::zero(); val(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    d[idx] += gv;
                }
                send(*input, like(*input, d));
            }
            Op::Conv2d { input, kernel, bias } => {
                let (gx, gk, gb) = conv2d_backward(val(*input), val(*kernel), &g);
                send(*input, like(*input, gx));
                send(*kernel, like(*kernel, gk));
                if let Some(b) = bias {
                    send(*b, like(*b, gb));
                }
            }
            Op::Pick { input, index } => {
                let mut d = vec![S::zero(); val(*input).len()];
                d[*index] = gd[0];
                send(*input, like(*input, d));
            }
            Op::Fused { inputs, partials } => {
                let gv = gd[0];
                for (&inp, p) in inputs.iter().zip(partials) {
                    send(inp, p.map(|x| x * gv));
                }
            }
        }
    }
}
