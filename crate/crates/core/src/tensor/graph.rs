use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Negative-side slope of the LeakyReLU used throughout the networks.
pub const LEAKY_SLOPE: f64 = 1e-3;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is spread over the left one.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// `[n]` or `[1, n]` repeated over every row of `[.., n]`.
    Row(usize),
    /// `[m, 1]` repeated over the columns of `[m, n]`.
    Col(usize),
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Bcast::Same);
        }
        let nb: usize = b.iter().product();
        if nb == 1 {
            return Ok(Bcast::Scalar);
        }
        let last = *a.last().unwrap_or(&1);
        if (b == [last] || b == [1, last]) && !a.is_empty() {
            return Ok(Bcast::Row(last));
        }
        if let ([m, n], [bm, 1]) = (a, b) {
            if m == bm {
                return Ok(Bcast::Col(*n));
            }
        }
        Err(Error::dim(format!("cannot broadcast {b:?} onto {a:?}")))
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
            Bcast::Col(n) => i / n,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    LeakyRelu,
    Exp,
    Sqrt,
    Acos,
    Scale(f64),
    Offset,
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Bcast),
    Unary(Unary, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-step gradient tape.
///
/// Nodes are appended in execution order, which is already a topological
/// order, so backward is a single reverse sweep. Gradients from a previous
/// call to [`Graph::backward`] are discarded on the next call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// `c[m,n] (+)= a · b` where the operands may be given transposed via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: every stride/extent pair addresses memory inside the slices,
    // which the callers guarantee by construction from validated shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let bc = Bcast::resolve(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bc.index(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b, bc), rg))
    }

    /// `a + b`; `b` may be a scalar, a row vector or a column vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let f = |v: f64| match kind {
            Unary::Tanh => v.tanh(),
            Unary::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Unary::LeakyRelu => {
                if v >= 0.0 {
                    v
                } else {
                    LEAKY_SLOPE * v
                }
            }
            Unary::Exp => v.exp(),
            Unary::Sqrt => v.sqrt(),
            Unary::Acos => v.acos(),
            Unary::Scale(c) => c * v,
            Unary::Offset => v,
            Unary::Clamp(lo, hi) => v.clamp(lo, hi),
        };
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// `x` for `x >= 0`, `1e-3 * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(Unary::LeakyRelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn acos(&mut self, x: Var) -> Var {
        self.unary(Unary::Acos, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.unary(Unary::Offset, x);
        for d in self.nodes[v.0].value.data_mut() {
            *d += c;
        }
        v
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Parameter(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.unary(Unary::Clamp(lo, hi), x))
    }

    /// Row-wise softmax over the last axis of a matrix.
    ///
    /// With `causal`, entry `(i, j)` for `j > i` is excluded from the
    /// normalization and comes out exactly zero, which is the `-inf`-logit
    /// mask without ever materializing an infinity.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let rows = xv.numel() / n;
        if causal && (xv.rank() != 2 || rows > n) {
            return Err(Error::dim(format!(
                "causal softmax needs rows <= cols, got {:?}",
                xv.shape()
            )));
        }
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * n..(r + 1) * n];
            let valid = if causal { r + 1 } else { n };
            let max = src[..valid]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for j in 0..valid {
                let e = (src[j] - max).exp();
                dst[j] = e;
                sum += e;
            }
            for v in &mut dst[..valid] {
                *v /= sum;
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// (population) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(format!(
                "layer_norm gain/bias must have {d} entries"
            )));
        }
        let rows = xv.numel() / d;
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Outside training, or with `p == 0`, returns `x`
    /// itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat {s:?} with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start >= end || end > xs[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{end} on axis {axis} of {xs:?}"
            )));
        }
        let (outer, inner) = outer_inner(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * xs[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = xs;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::Transpose(x),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("sum_last of a scalar"))?;
        let data: Vec<f64> = xv.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::SumLast(x), rg))
    }

    /// Populates gradients for every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let gd = g.data();
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            f(slot
                .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
                .data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = node.value.shape()[1];
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(a, &mut |ga| {
                    gemm(m, n, k, gd, n as isize, 1, bv, 1, n as isize, 1.0, ga)
                });
                acc(b, &mut |gb| {
                    gemm(k, m, n, av, 1, k as isize, gd, n as isize, 1, 1.0, gb)
                });
            }
            &Op::Binary(kind, a, b, bc) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(a, &mut |ga| {
                    for (j, gj) in ga.iter_mut().enumerate() {
                        let y = bv[bc.index(j)];
                        *gj += match kind {
                            Binary::Add | Binary::Sub => gd[j],
                            Binary::Mul => gd[j] * y,
                            Binary::Div => gd[j] / y,
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for j in 0..gd.len() {
                        let y = bv[bc.index(j)];
                        gb[bc.index(j)] += match kind {
                            Binary::Add => gd[j],
                            Binary::Sub => -gd[j],
                            Binary::Mul => gd[j] * av[j],
                            Binary::Div => -gd[j] * av[j] / (y * y),
                        };
                    }
                });
            }
            &Op::Unary(kind, x) => {
                let xv = nodes[x.0].value.data();
                acc(x, &mut |gx| {
                    for j in 0..gx.len() {
                        let d = match kind {
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::LeakyRelu => {
                                if xv[j] >= 0.0 {
                                    1.0
                                } else {
                                    LEAKY_SLOPE
                                }
                            }
                            Unary::Exp => out[j],
                            Unary::Sqrt => 0.5 / out[j],
                            Unary::Acos => -1.0 / (1.0 - xv[j] * xv[j]).sqrt(),
                            Unary::Scale(c) => c,
                            Unary::Offset => 1.0,
                            Unary::Clamp(lo, hi) => {
                                if xv[j] >= lo && xv[j] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[j] += gd[j] * d;
                    }
                });
            }
            &Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                acc(x, &mut |gx| {
                    for (r, yr) in out.chunks(n).enumerate() {
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                acc(*gain, &mut |gg| {
                    for (j, (h, g)) in xhat.iter().zip(gd).enumerate() {
                        gg[j % d] += h * g;
                    }
                });
                acc(*bias, &mut |gb| {
                    for (j, g) in gd.iter().enumerate() {
                        gb[j % d] += g;
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gd[r * d + j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += gd[j] * mask[j];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let (outer, inner) = outer_inner(node.value.shape(), axis);
                let total = node.value.shape()[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for j in 0..len * inner {
                                gp[o * len * inner + j] += gd[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = nodes[x.0].value.shape();
                let len = node.value.shape()[axis];
                let (outer, inner) = outer_inner(xs, axis);
                let full = xs[axis];
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += gd[o * len * inner + j];
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (m, n) = nodes[x.0].value.dims2().unwrap();
                acc(x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += gd[0]));
            }
            &Op::Reshape(x) => {
                acc(x, &mut |gx| {
                    gx.iter_mut().zip(gd).for_each(|(v, g)| *v += g)
                });
            }
            &Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += gd[0] / n));
            }
            &Op::SumLast(x) => {
                let n = *nodes[x.0].value.shape().last().unwrap();
                acc(x, &mut |gx| {
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += gd[j / n];
                    }
                });
            }
        }
    }
}
