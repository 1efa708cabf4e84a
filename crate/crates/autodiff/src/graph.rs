use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, numel, reduce_to_shape, strides,
    Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
    BroadcastTo(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AdaptiveAvgPool(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::IndexSelect(..) => "index_select",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::AdaptiveAvgPool(..) => "adaptive_avg_pool2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation graph.
///
/// Every operation appends a node holding its forward value, so nodes are
/// already in topological order and [`Graph::backward`] is a single reverse
/// sweep. Build a fresh graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    (numel(shape) / d, d)
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
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node (in evaluation order) whose value contains NaN or ±∞.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out = broadcast_shape(name, ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; numel(&out)];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(index) = self.value(b).data().iter().position(|&x| x == 0.0) {
            return Err(TensorError::DivisionByZero { index });
        }
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) =
            self.value(a).data().iter().enumerate().find(|(_, &x)| x <= 0.0)
        {
            return Err(TensorError::NonPositiveLog { index, value });
        }
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Log(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]` and shared-weight
    /// `[b,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let (out_shape, data) = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                let k = sa[sa.len() - 1];
                if sb[0] != k {
                    return Err(mismatch());
                }
                let m = numel(&sa) / k;
                let n = sb[1];
                let mut c = vec![0.0; m * n];
                kernels::gemm(m, k, n, ta, false, tb, false, 0.0, &mut c);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                (shape, c)
            }
            (3, 3) => {
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != bs || sb[1] != k {
                    return Err(mismatch());
                }
                let n = sb[2];
                let mut c = vec![0.0; bs * m * n];
                for i in 0..bs {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &ta[i * m * k..(i + 1) * m * k],
                        false,
                        &tb[i * k * n..(i + 1) * k * n],
                        false,
                        0.0,
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
                (vec![bs, m, n], c)
            }
            _ => return Err(mismatch()),
        };
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let pst: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let zero = vec![0; perm.len()];
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for_each_broadcast(&out_shape, &pst, &zero, |o, i, _| data[o] = src[i]);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, keepdim: bool, name: &'static str) -> Result<(Tensor, bool)> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: name,
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok((Tensor::new(out_shape, out)?, self.rg(a)))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (t, rg) = self.reduce_axis(a, axis, keepdim, "sum_axis")?;
        Ok(self.push(t, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (t, rg) = self.reduce_axis(a, axis, keepdim, "mean_axis")?;
        let len = self.shape(a)[axis] as f64;
        let t = t.map(|x| x / len);
        Ok(self.push(t, Op::MeanAxis(a, axis), rg))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} outside extent {}", start + len, shape[axis]),
            });
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let t = self.gather(a, axis, &indices);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Slice(a, axis, start), rg))
    }

    /// Picks `indices` (in the given order) along `axis`.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "index_select",
                axis,
                rank: shape.len(),
            });
        }
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("indices {indices:?} invalid for extent {}", shape[axis]),
            });
        }
        let t = self.gather(a, axis, indices);
        let rg = self.rg(a);
        Ok(self.push(t, Op::IndexSelect(a, axis, indices.to_vec()), rg))
    }

    fn gather(&self, a: Var, axis: usize, indices: &[usize]) -> Tensor {
        let shape = self.shape(a);
        let (outer, len, inner) = split_axis(shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                data.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        Tensor::new(out_shape, data).expect("gather shape")
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let out = broadcast_shape("broadcast_to", &src_shape, shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src_shape,
                rhs: shape.to_vec(),
            });
        }
        let st = broadcast_strides(&src_shape, &out);
        let zero = vec![0; out.len()];
        let src = self.value(a).data();
        let mut data = vec![0.0; numel(&out)];
        for_each_broadcast(&out, &st, &zero, |o, i, _| data[o] = src[i]);
        let t = Tensor::new(out, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::BroadcastTo(a), rg))
    }

    // ---- normalisations over the last axis ------------------------------

    /// Row-max-shifted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, d) = last_axis(v.shape());
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("softmax shape");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// `x - logsumexp(x)` over the last axis, max-shifted.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, d) = last_axis(v.shape());
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("log_softmax shape");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Zero-mean, unit-variance over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let (rows, d) = last_axis(v.shape());
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("layer_norm shape");
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm(a, inv_std), rg)
    }

    /// Scales each last-axis row to unit Euclidean length.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (rows, d) = last_axis(v.shape());
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::DivisionByZero { index: r * d });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::L2Normalize(a, norms), rg))
    }

    // ---- spatial --------------------------------------------------------

    /// 2-D convolution of `[N,C,H,W]` by `[O,C,kh,kw]` plus bias `[O]`,
    /// with replicate padding so constant inputs stay constant.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws,
                rhs: bs,
            });
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {ws:?} with stride {stride} does not fit input {xs:?}"),
            });
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let mut mat = vec![0.0; geom.o * ncols];
        kernels::gemm(geom.o, geom.k(), ncols, self.value(w).data(), false, &cols, false, 0.0, &mut mat);
        let p = geom.ho * geom.wo;
        let bias = self.value(b).data();
        let mut out = vec![0.0; geom.n * geom.o * p];
        for o in 0..geom.o {
            for n in 0..geom.n {
                let dst = &mut out[(n * geom.o + o) * p..(n * geom.o + o + 1) * p];
                let src = &mat[o * ncols + n * p..o * ncols + (n + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let t = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Adaptive average pooling of `[N,C,H,W]` to `[N,C,oh,ow]`. Output
    /// extents larger than the input replicate source cells.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 {
            return Err(TensorError::Invalid {
                op: "adaptive_avg_pool2d",
                msg: format!("cannot pool {xs:?} to {oh}x{ow}"),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = kernels::adaptive_bin(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = kernels::adaptive_bin(j, w, ow);
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        s += plane[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                    }
                    out[(p * oh + i) * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let t = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AdaptiveAvgPool(x, oh, ow), rg))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates d`output`/d`leaf` into every trainable leaf's gradient.
    ///
    /// Gradients add onto whatever is already stored, so calling this twice
    /// without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_node = &self.nodes[output.0];
        if out_node.value.numel() != 1 {
            return Err(TensorError::NotScalar(out_node.value.shape().to_vec()));
        }
        if !out_node.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(shape, g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, reduce_to_shape(g, out.shape(), shp(*a)));
                let mut gb = reduce_to_shape(g, out.shape(), shp(*b));
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                acc(*b, gb);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let sa = broadcast_strides(shp(*a), out.shape());
                let sb = broadcast_strides(shp(*b), out.shape());
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    if is_div {
                        ga[ia] += g[o] / bv[ib];
                        gb[ib] -= g[o] * av[ia] / (bv[ib] * bv[ib]);
                    } else {
                        ga[ia] += g[o] * bv[ib];
                        gb[ib] += g[o] * av[ia];
                    }
                });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Exp(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Sigmoid(a) => acc(
                *a,
                g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let f = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (x, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *x = gv * f;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                if sb.len() == 2 {
                    let k = sb[0];
                    let n = sb[1];
                    let m = av.len() / k;
                    kernels::gemm(m, n, k, g, false, bv, true, 0.0, &mut ga);
                    kernels::gemm(k, m, n, av, true, g, false, 0.0, &mut gb);
                } else {
                    let (bs, m, k) = (sa[0], sa[1], sa[2]);
                    let n = sb[2];
                    for t in 0..bs {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        kernels::gemm(m, n, k, gs, false, &bv[t * k * n..(t + 1) * k * n], true, 0.0, &mut ga[t * m * k..(t + 1) * m * k]);
                        kernels::gemm(k, m, n, &av[t * m * k..(t + 1) * m * k], true, gs, false, 0.0, &mut gb[t * k * n..(t + 1) * k * n]);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Permute(a, perm) => {
                let st = strides(shp(*a));
                let pst: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let zero = vec![0; perm.len()];
                let mut d = vec![0.0; g.len()];
                for_each_broadcast(out.shape(), &pst, &zero, |o, i, _| d[i] = g[o]);
                acc(*a, d);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat(parts, axis) => {
                let total = out.shape()[*axis];
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        d[o * len * inner..(o + 1) * len * inner].copy_from_slice(&g[s..s + len * inner]);
                    }
                    acc(p, d);
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let len = out.shape()[*axis];
                let indices: Vec<usize> = (*start..*start + len).collect();
                acc(*a, scatter(g, shp(*a), *axis, &indices));
            }
            Op::IndexSelect(a, axis, indices) => acc(*a, scatter(g, shp(*a), *axis, indices)),
            Op::BroadcastTo(a) => acc(*a, reduce_to_shape(g, out.shape(), shp(*a))),
            Op::Softmax(a) => {
                let (rows, d) = last_axis(out.shape());
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let (rows, d) = last_axis(out.shape());
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let gs: f64 = g[s.clone()].iter().sum();
                    for k in s {
                        dx[k] = g[k] - y[k].exp() * gs;
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm(a, inv_std) => {
                let (rows, d) = last_axis(out.shape());
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let mg = g[s.clone()].iter().sum::<f64>() / d as f64;
                    let mgy = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in s {
                        dx[k] = inv_std[r] * (g[k] - mg - y[k] * mgy);
                    }
                }
                acc(*a, dx);
            }
            Op::L2Normalize(a, norms) => {
                let (rows, d) = last_axis(out.shape());
                let y = out.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        dx[k] = (g[k] - y[k] * dot) / norms[r];
                    }
                }
                acc(*a, dx);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.ho * geom.wo;
                let ncols = geom.cols();
                let mut dmat = vec![0.0; geom.o * ncols];
                for n in 0..geom.n {
                    for o in 0..geom.o {
                        dmat[o * ncols + n * p..o * ncols + (n + 1) * p]
                            .copy_from_slice(&g[(n * geom.o + o) * p..(n * geom.o + o + 1) * p]);
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let db = (0..geom.o).map(|o| dmat[o * ncols..(o + 1) * ncols].iter().sum()).collect();
                    acc(*b, db);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; geom.o * geom.k()];
                    kernels::gemm(geom.o, ncols, geom.k(), &dmat, false, cols, true, 0.0, &mut dw);
                    acc(*w, dw);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; geom.k() * ncols];
                    kernels::gemm(geom.k(), geom.o, ncols, val(*w), true, &dmat, false, 0.0, &mut dcols);
                    let mut dx = vec![0.0; geom.n * geom.c * geom.h * geom.w];
                    kernels::col2im(&dcols, geom, &mut dx);
                    acc(*x, dx);
                }
            }
            Op::AdaptiveAvgPool(a, oh, ow) => {
                let xs = shp(*a);
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for i in 0..*oh {
                        let (y0, y1) = kernels::adaptive_bin(i, h, *oh);
                        for j in 0..*ow {
                            let (x0, x1) = kernels::adaptive_bin(j, w, *ow);
                            let share = g[(p * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[p * h * w + yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                acc(*a, dx);
            }
        }
    }
}

fn scatter(g: &[f64], shape: &[usize], axis: usize, indices: &[usize]) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let k = indices.len();
    let mut d = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for (j, &idx) in indices.iter().enumerate() {
            let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
            let dst = &mut d[(o * len + idx) * inner..(o * len + idx + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    }
    d
}
