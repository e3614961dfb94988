//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! state to run its backward rule. Nodes are appended after their inputs,
//! so the tape is always in topological order and [`Tape::backward`] is a
//! single reverse sweep. A fresh tape is used for every training step.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Clamp applied to probabilities before taking logarithms in [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ExpandMul(Var, Var),
    MaxPoolAxis1 {
        input: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        img: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    SumLastAxis(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
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

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
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

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a)?;
        let (k2, m) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::raw(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds `bias` (holding exactly last-extent values) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(a).last().unwrap_or(&0);
        if self.value(bias).len() != last {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        if last > 0 {
            for row in data.chunks_mut(last) {
                for (x, y) in row.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| stable_sigmoid(x)).collect();
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::raw(self.shape(a).to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let mut data = self.value(a).data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![r, c], data), Op::SoftmaxRows(a), rg))
    }

    /// `out[i,j,k] = att[i,j] * v[j,k]`.
    pub fn broadcast_expand_mul(&mut self, att: Var, v: Var) -> Result<Var> {
        let (n, m) = self.dims2(att)?;
        let (m2, d) = self.dims2(v)?;
        if m != m2 {
            return Err(Error::shape(format!(
                "expand_mul {:?} with {:?}",
                self.shape(att),
                self.shape(v)
            )));
        }
        let a = self.value(att).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; n * m * d];
        for i in 0..n {
            for j in 0..m {
                let w = a[i * m + j];
                let dst = &mut out[(i * m + j) * d..(i * m + j + 1) * d];
                for (o, x) in dst.iter_mut().zip(&vv[j * d..(j + 1) * d]) {
                    *o = w * x;
                }
            }
        }
        let rg = self.rg(att) || self.rg(v);
        Ok(self.push(Tensor::raw(vec![n, m, d], out), Op::ExpandMul(att, v), rg))
    }

    /// Max over the middle axis of `[N, M, d]`. Ties go to the lowest index.
    pub fn max_pool_axis1(&mut self, t: Var) -> Result<Var> {
        let (n, m, d) = match self.shape(t) {
            &[n, m, d] => (n, m, d),
            s => return Err(Error::shape(format!("max_pool_axis1 expects rank 3, got {s:?}"))),
        };
        if m == 0 {
            return Err(Error::EmptyAxis);
        }
        let x = self.value(t).data();
        let mut out = vec![0.0; n * d];
        let mut argmax = vec![0usize; n * d];
        for i in 0..n {
            for k in 0..d {
                let mut best = x[i * m * d + k];
                let mut arg = 0;
                for j in 1..m {
                    let v = x[(i * m + j) * d + k];
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                out[i * d + k] = best;
                argmax[i * d + k] = arg;
            }
        }
        let rg = self.rg(t);
        Ok(self.push(
            Tensor::raw(vec![n, d], out),
            Op::MaxPoolAxis1 { input: t, argmax },
            rg,
        ))
    }

    /// Positions selected by the last [`Tape::max_pool_axis1`] producing `v`.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPoolAxis1 { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Valid (unpadded) cross-correlation of `[C,H,W]` with `[F,C,k,k]`.
    pub fn conv2d(&mut self, img: Var, kernels: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (c, h, w) = match self.shape(img) {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape(format!("conv2d input must be [C,H,W], got {s:?}"))),
        };
        let (f, kc, k) = match self.shape(kernels) {
            &[f, kc, k1, k2] if k1 == k2 => (f, kc, k1),
            s => return Err(Error::shape(format!("conv2d kernels must be [F,C,k,k], got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d kernels {:?} for input {:?}",
                self.shape(kernels),
                self.shape(img)
            )));
        }
        if stride == 0 {
            return Err(Error::Domain("conv2d stride must be at least 1".into()));
        }
        if k > h || k > w {
            return Err(Error::KernelTooLarge {
                kernel: k,
                height: h,
                width: w,
            });
        }
        if let Some(b) = bias {
            if self.value(b).len() != f {
                return Err(Error::shape(format!("conv2d bias {:?} for {f} filters", self.shape(b))));
            }
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let x = self.value(img).data();
        let kw = self.value(kernels).data();
        let mut out = vec![0.0; f * oh * ow];
        for fi in 0..f {
            let dst = &mut out[fi * oh * ow..(fi + 1) * oh * ow];
            if let Some(b) = bias {
                dst.fill(self.value(b).data()[fi]);
            }
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kw[((fi * c + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let src = &plane[(oy * stride + ky) * w + kx..];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for (ox, o) in drow.iter_mut().enumerate() {
                                *o += wv * src[ox * stride];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(img) || self.rg(kernels) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::raw(vec![f, oh, ow], out),
            Op::Conv2d {
                img,
                kernels,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `pred` against a 0/1 `target`.
    ///
    /// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the backward pass
    /// uses the clamped value and passes straight through the clamp.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "bce prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Domain(format!("bce target {bad} outside {{0, 1}}")));
        }
        let p = self.value(pred).data();
        let n = p.len();
        if n == 0 {
            return Err(Error::EmptyAxis);
        }
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyAxis);
        }
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sums each row of a matrix into a `[rows x 1]` column.
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let x = self.value(a).data();
        let data = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![r, 1], data), Op::SumLastAxis(a), rg))
    }

    /// Concatenates matrices sharing a row count along the last axis.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::shape(format!(
                    "concat rows {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::raw(vec![r, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pc != c {
                return Err(Error::shape(format!(
                    "concat columns {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::raw(vec![rows, c], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start + len > c {
            return Err(Error::shape(format!("columns {start}..{} of {:?}", start + len, self.shape(a))));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::raw(vec![r, len], out), Op::SliceCols { input: a, start }, rg))
    }

    /// Selects rows (repeats allowed) of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("row {bad} of {:?}", self.shape(a))));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::raw(vec![rows.len(), c], out),
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[1, n])
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "layer_norm gain {:?} bias {:?} for {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(a)
            )));
        }
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let nv = (row[j] - mu) * is;
                normed[i * c + j] = nv;
                out[i * c + j] = nv * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::raw(vec![r, c], out),
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Populates gradients of every node that requires them, seeded at `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Returns the accumulation buffer for `v`, created zeroed on first use.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let m = val(*b).shape()[1];
                if wants(*a) {
                    gemm_nt_acc(g, val(*b).data(), slot(grads, nodes, *a), n, m, k);
                }
                if wants(*b) {
                    gemm_tn_acc(val(*a).data(), g, slot(grads, nodes, *b), n, k, m);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let s = slot(grads, nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        for (s, x) in slot(grads, nodes, v).iter_mut().zip(g) {
                            *s += x;
                        }
                    }
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    for (s, x) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *s += x;
                    }
                }
                if wants(*b) {
                    let c = val(*b).len();
                    let s = slot(grads, nodes, *b);
                    for row in g.chunks(c) {
                        for (sv, x) in s.iter_mut().zip(row) {
                            *sv += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    for ((s, x), o) in slot(grads, nodes, *a).iter_mut().zip(g).zip(other) {
                        *s += x * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    for ((s, x), o) in slot(grads, nodes, *b).iter_mut().zip(g).zip(other) {
                        *s += x * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    for (s, x) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *s += x * f;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    for ((s, x), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(out.data()) {
                        *s += x * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let inp = val(*a).data();
                    for ((s, x), i) in slot(grads, nodes, *a).iter_mut().zip(g).zip(inp) {
                        if *i > 0.0 {
                            *s += x;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let c = out.shape()[1];
                    let y = out.data();
                    let s = slot(grads, nodes, *a);
                    if c > 0 {
                        for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((sv, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                                *sv += yv * (gv - dot);
                            }
                        }
                    }
                }
            }
            Op::ExpandMul(att, v) => {
                let (n, m, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                if wants(*att) {
                    let vv = val(*v).data();
                    let s = slot(grads, nodes, *att);
                    for i in 0..n {
                        for j in 0..m {
                            let gs = &g[(i * m + j) * d..(i * m + j + 1) * d];
                            s[i * m + j] += gs.iter().zip(&vv[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if wants(*v) {
                    let a = val(*att).data();
                    let s = slot(grads, nodes, *v);
                    for i in 0..n {
                        for j in 0..m {
                            let w = a[i * m + j];
                            let gs = &g[(i * m + j) * d..(i * m + j + 1) * d];
                            for (sv, gv) in s[j * d..(j + 1) * d].iter_mut().zip(gs) {
                                *sv += w * gv;
                            }
                        }
                    }
                }
            }
            Op::MaxPoolAxis1 { input, argmax } => {
                if wants(*input) {
                    let (m, d) = (val(*input).shape()[1], val(*input).shape()[2]);
                    let s = slot(grads, nodes, *input);
                    for (pos, (&j, gv)) in argmax.iter().zip(g).enumerate() {
                        let (i, k) = (pos / d, pos % d);
                        s[(i * m + j) * d + k] += gv;
                    }
                }
            }
            Op::Conv2d {
                img,
                kernels,
                bias,
                stride,
            } => {
                let stride = *stride;
                let (c, h, w) = (val(*img).shape()[0], val(*img).shape()[1], val(*img).shape()[2]);
                let (f, k) = (val(*kernels).shape()[0], val(*kernels).shape()[2]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                if let Some(b) = bias {
                    if wants(*b) {
                        let s = slot(grads, nodes, *b);
                        for fi in 0..f {
                            s[fi] += g[fi * oh * ow..(fi + 1) * oh * ow].iter().sum::<f64>();
                        }
                    }
                }
                if wants(*kernels) {
                    let x = val(*img).data();
                    let s = slot(grads, nodes, *kernels);
                    for fi in 0..f {
                        let gp = &g[fi * oh * ow..(fi + 1) * oh * ow];
                        for ci in 0..c {
                            let plane = &x[ci * h * w..(ci + 1) * h * w];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = 0.0;
                                    for oy in 0..oh {
                                        let src = &plane[(oy * stride + ky) * w + kx..];
                                        let grow = &gp[oy * ow..(oy + 1) * ow];
                                        for (ox, gv) in grow.iter().enumerate() {
                                            acc += gv * src[ox * stride];
                                        }
                                    }
                                    s[((fi * c + ci) * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
                if wants(*img) {
                    let kw = val(*kernels).data();
                    let s = slot(grads, nodes, *img);
                    for fi in 0..f {
                        let gp = &g[fi * oh * ow..(fi + 1) * oh * ow];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = kw[((fi * c + ci) * k + ky) * k + kx];
                                    for oy in 0..oh {
                                        let base = ci * h * w + (oy * stride + ky) * w + kx;
                                        for ox in 0..ow {
                                            s[base + ox * stride] += wv * gp[oy * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Bce { pred, target } => {
                if wants(*pred) {
                    let p = val(*pred).data();
                    let n = p.len() as f64;
                    for ((s, &pv), &t) in slot(grads, nodes, *pred).iter_mut().zip(p).zip(target) {
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        *s += g[0] * (pc - t) / (pc * (1.0 - pc)) / n;
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = val(*a).len() as f64;
                    for s in slot(grads, nodes, *a).iter_mut() {
                        *s += g[0] / n;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for s in slot(grads, nodes, *a).iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::SumLastAxis(a) => {
                if wants(*a) {
                    let c = val(*a).shape()[1];
                    let s = slot(grads, nodes, *a);
                    if c > 0 {
                        for (row, gv) in s.chunks_mut(c).zip(g) {
                            for x in row {
                                *x += gv;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if wants(p) {
                        let s = slot(grads, nodes, p);
                        for i in 0..r {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        for (s, x) in slot(grads, nodes, p).iter_mut().zip(&g[offset..offset + n]) {
                            *s += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols { input, start } => {
                if wants(*input) {
                    let c = val(*input).shape()[1];
                    let (r, len) = (out.shape()[0], out.shape()[1]);
                    let s = slot(grads, nodes, *input);
                    for i in 0..r {
                        for j in 0..len {
                            s[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::GatherRows { input, rows } => {
                if wants(*input) {
                    let c = val(*input).shape()[1];
                    let s = slot(grads, nodes, *input);
                    for (o, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[i * c + j] += g[o * c + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    for (s, x) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *s += x;
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let c = out.shape()[1];
                let gamma = val(*gain).data();
                if wants(*bias) {
                    let s = slot(grads, nodes, *bias);
                    for row in g.chunks(c) {
                        for (sv, x) in s.iter_mut().zip(row) {
                            *sv += x;
                        }
                    }
                }
                if wants(*gain) {
                    let s = slot(grads, nodes, *gain);
                    for (grow, nrow) in g.chunks(c).zip(normed.chunks(c)) {
                        for ((sv, x), nv) in s.iter_mut().zip(grow).zip(nrow) {
                            *sv += x * nv;
                        }
                    }
                }
                if wants(*input) {
                    let s = slot(grads, nodes, *input);
                    let cf = c as f64;
                    for (i, (grow, nrow)) in g.chunks(c).zip(normed.chunks(c)).enumerate() {
                        let dn: Vec<f64> = grow.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[i * c + j] += inv_std[i] / cf * (cf * dn[j] - sum_dn - nrow[j] * sum_dn_n);
                        }
                    }
                }
            }
        }
    }
}
