//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the list in reverse and accumulates vector-Jacobian products. Leaves created
//! with [`Graph::constant`] never receive gradients, and neither does any node
//! whose inputs are all constants.

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, log_softmax_into, softmax_into, validate_temperature, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node in a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Ln(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when nothing flowed to `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Pairing of two operands: equal shapes or one side a single value.
#[derive(Clone, Copy, PartialEq)]
enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(a: &Tensor, b: &Tensor, what: &str) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if a.numel() == 1 {
        Ok(Pairing::LeftScalar)
    } else if b.numel() == 1 {
        Ok(Pairing::RightScalar)
    } else {
        same_shape(a, b, what).map(|_| Pairing::Same)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Tensor { grad: None, ..t }, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Tensor { grad: None, ..t }, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let p = pairing(ta, tb, what)?;
        let (shape, data): (Vec<usize>, Vec<f64>) = match p {
            Pairing::Same => (
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Pairing::LeftScalar => {
                let x = ta.data()[0];
                (tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
            }
            Pairing::RightScalar => {
                let y = tb.data()[0];
                (ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        Ok((Tensor::new(shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "maximum", f64::max)?;
        Ok(self.push(t, Op::Maximum(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "minimum", f64::min)?;
        Ok(self.push(t, Op::Minimum(a, b), rg))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| scale * t.data()[i] + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds a length-`D` bias to every row of an `N×D` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(bias) != [d] {
            return Err(invalid(format!("add_bias: bias {:?} for {}x{}", self.shape(bias), n, d)));
        }
        let (tx, tb) = (self.value(x), self.value(bias));
        let out = Tensor::from_fn(&[n, d], |i| tx.data()[i] + tb.data()[i % d]);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(invalid(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        let out = Tensor::from_fn(&[c, r], |i| {
            let (j, k) = (i / r, i % r);
            t.data()[k * c + j]
        });
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Stacks rank-2 tensors with equal column counts (the token axis).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows of nothing"));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.value(p).dims2()?;
            if c2 != c {
                return Err(invalid(format!("concat_rows: {c2} columns, expected {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols of nothing"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.value(p).dims2()?;
            if r2 != r {
                return Err(invalid(format!("concat_cols: {r2} rows, expected {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).rows(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if start >= end || end > c {
            return Err(invalid(format!("column range {start}..{end} out of 0..{c}")));
        }
        let w = end - start;
        let out = Tensor::from_fn(&[r, w], |i| t.data()[(i / w) * c + start + i % w]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Picks flat elements by index into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(invalid("gather of no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(invalid(format!("gather index {bad} out of {}", t.numel())));
        }
        let out = Tensor::vector(indices.iter().map(|&i| t.data()[i]).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, indices.to_vec()), rg))
    }

    fn last_axis(&self, x: Var) -> usize {
        *self.shape(x).last().expect("rank >= 1")
    }

    /// Softmax over the last axis at temperature `t`.
    pub fn softmax_t(&mut self, x: Var, t: f64) -> Result<Var> {
        validate_temperature(t)?;
        let n = self.last_axis(x);
        let src = self.value(x);
        let mut out = vec![0.0; src.numel()];
        for (o, s) in out.chunks_mut(n).zip(src.data().chunks(n)) {
            softmax_into(s, t, o);
        }
        let out = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, t), rg))
    }

    /// Log of the temperature softmax over the last axis, computed stably.
    pub fn log_softmax_t(&mut self, x: Var, t: f64) -> Result<Var> {
        validate_temperature(t)?;
        let n = self.last_axis(x);
        let src = self.value(x);
        let mut out = vec![0.0; src.numel()];
        for (o, s) in out.chunks_mut(n).zip(src.data().chunks(n)) {
            log_softmax_into(s, t, o);
        }
        let out = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x, t), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| f(t.data()[i]));
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Row-wise layer normalization of an `N×D` matrix with affine `gamma`, `beta` of length `D`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(invalid("layer_norm: affine parameters must have length D"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * r * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::matrix(n, d, out)?, Op::LayerNorm { x, gamma, beta, rstd }, rg))
    }

    /// Stride-1 2-D convolution. `x: [Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (cin, h, wd) = dims3(self.value(x))?;
        let (cout, cin2, k, k2) = dims4(self.value(w))?;
        if cin != cin2 || k != k2 {
            return Err(invalid(format!("conv2d: input {cin} channels, kernel {:?}", self.shape(w))));
        }
        if self.shape(b) != [cout] {
            return Err(invalid("conv2d: bias length must equal output channels"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid("conv2d: kernel larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let cols = im2col(self.value(x).data(), cin, h, wd, k, pad, ho, wo);
        let mut out = vec![0.0; cout * ho * wo];
        for (co, &bias) in self.value(b).data().iter().enumerate() {
            out[co * ho * wo..(co + 1) * ho * wo].fill(bias);
        }
        gemm_acc(self.value(w).data(), &cols, &mut out, cout, cin * k * k, ho * wo);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![cout, ho, wo], out)?, Op::Conv2d { x, w, b, pad }, rg))
    }

    /// Inference-mode batch normalization of `[C,H,W]` with fixed statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c || var.len() != c {
            return Err(invalid("batch_norm: per-channel parameters must have length C"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / hw;
            (tx.data()[i] - mean[ch]) * inv_std[ch] * tg.data()[ch] + tb.data()[ch]
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, mean: mean.to_vec(), inv_std };
        Ok(self.push(out, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(invalid(format!("backward from non-scalar of shape {:?}", lt.shape())));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn binary_back(
        &self,
        a: Var,
        b: Var,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let p = pairing(ta, tb, "").unwrap_or(Pairing::Same);
        let n = gy.len();
        let xa = |i: usize| if p == Pairing::LeftScalar { ta.data()[0] } else { ta.data()[i] };
        let xb = |i: usize| if p == Pairing::RightScalar { tb.data()[0] } else { tb.data()[i] };
        if let Some(g) = self.acc(grads, a) {
            for i in 0..n {
                let j = if p == Pairing::LeftScalar { 0 } else { i };
                g[j] += gy[i] * da(xa(i), xb(i));
            }
        }
        if let Some(g) = self.acc(grads, b) {
            for i in 0..n {
                let j = if p == Pairing::RightScalar { 0 } else { i };
                g[j] += gy[i] * db(xa(i), xb(i));
            }
        }
    }

    fn unary_back(&self, x: Var, gy: &[f64], grads: &mut [Option<Vec<f64>>], d: impl Fn(f64, f64) -> f64, out: &Tensor) {
        let tx = self.value(x).data();
        if let Some(g) = self.acc(grads, x) {
            for i in 0..gy.len() {
                g[i] += gy[i] * d(tx[i], out.data()[i]);
            }
        }
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => self.binary_back(a, b, gy, grads, |_, _| 1.0, |_, _| 1.0),
            &Op::Sub(a, b) => self.binary_back(a, b, gy, grads, |_, _| 1.0, |_, _| -1.0),
            &Op::Mul(a, b) => self.binary_back(a, b, gy, grads, |_, y| y, |x, _| x),
            &Op::Div(a, b) => self.binary_back(a, b, gy, grads, |_, y| 1.0 / y, |x, y| -x / (y * y)),
            &Op::Maximum(a, b) => self.binary_back(
                a,
                b,
                gy,
                grads,
                |x, y| if x >= y { 1.0 } else { 0.0 },
                |x, y| if x >= y { 0.0 } else { 1.0 },
            ),
            &Op::Minimum(a, b) => self.binary_back(
                a,
                b,
                gy,
                grads,
                |x, y| if x <= y { 1.0 } else { 0.0 },
                |x, y| if x <= y { 0.0 } else { 1.0 },
            ),
            &Op::Affine(x, s) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += s * d);
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
                let d = self.shape(bias)[0];
                if let Some(g) = self.acc(grads, bias) {
                    for row in gy.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("rank 2");
                let n = out.shape()[1];
                let bv = self.value(b).data();
                let av = self.value(a).data();
                if let Some(g) = self.acc(grads, a) {
                    gemm_nt_acc(gy, bv, g, m, n, k);
                }
                if let Some(g) = self.acc(grads, b) {
                    gemm_tn_acc(av, gy, g, m, k, n);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2().expect("rank 2");
                if let Some(g) = self.acc(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(g) = self.acc(grads, p) {
                        g.iter_mut().zip(&gy[off..off + n]).for_each(|(g, &d)| *g += d);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let r = out.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(g) = self.acc(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                g[i * w + j] += gy[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceRows(x, start) => {
                let c = out.shape()[1];
                if let Some(g) = self.acc(grads, x) {
                    g[start * c..start * c + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(g, &d)| *g += d);
                }
            }
            &Op::SliceCols(x, start) => {
                let c = self.shape(x)[1];
                let w = out.shape()[1];
                if let Some(g) = self.acc(grads, x) {
                    for (i, row) in gy.chunks(w).enumerate() {
                        for (j, &d) in row.iter().enumerate() {
                            g[i * c + start + j] += d;
                        }
                    }
                }
            }
            Op::Gather(x, indices) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (&i, &d) in indices.iter().zip(gy) {
                        g[i] += d;
                    }
                }
            }
            &Op::Softmax(x, t) => {
                let n = *out.shape().last().expect("rank >= 1");
                if let Some(g) = self.acc(grads, x) {
                    for ((gr, pr), dr) in g.chunks_mut(n).zip(out.data().chunks(n)).zip(gy.chunks(n)) {
                        let dot: f64 = pr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for j in 0..n {
                            gr[j] += pr[j] * (dr[j] - dot) / t;
                        }
                    }
                }
            }
            &Op::LogSoftmax(x, t) => {
                let n = *out.shape().last().expect("rank >= 1");
                if let Some(g) = self.acc(grads, x) {
                    for ((gr, lr), dr) in g.chunks_mut(n).zip(out.data().chunks(n)).zip(gy.chunks(n)) {
                        let total: f64 = dr.iter().sum();
                        for j in 0..n {
                            gr[j] += (dr[j] - lr[j].exp() * total) / t;
                        }
                    }
                }
            }
            &Op::Ln(x) => self.unary_back(x, gy, grads, |v, _| 1.0 / v, out),
            &Op::Exp(x) => self.unary_back(x, gy, grads, |_, y| y, out),
            &Op::Gelu(x) => self.unary_back(x, gy, grads, |v, _| gelu_parts(v).1, out),
            &Op::Relu(x) => self.unary_back(x, gy, grads, |v, _| if v > 0.0 { 1.0 } else { 0.0 }, out),
            &Op::Sigmoid(x) => self.unary_back(x, gy, grads, |_, y| y * (1.0 - y), out),
            &Op::Abs(x) => self.unary_back(x, gy, grads, |v, _| v.signum() * (v != 0.0) as u8 as f64, out),
            &Op::Square(x) => self.unary_back(x, gy, grads, |v, _| 2.0 * v, out),
            &Op::Clamp(x, lo, hi) => {
                self.unary_back(x, gy, grads, |v, _| if v > lo && v < hi { 1.0 } else { 0.0 }, out)
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (n, d) = out.dims2().expect("rank 2");
                let tx = self.value(*x).data();
                let tg = self.value(*gamma).data();
                let mut xhat = vec![0.0; n * d];
                for i in 0..n {
                    let row = &tx[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xhat[i * d + j] = (row[j] - mean) * rstd[i];
                    }
                }
                if let Some(g) = self.acc(grads, *gamma) {
                    for i in 0..n * d {
                        g[i % d] += gy[i] * xhat[i];
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for i in 0..n * d {
                        g[i % d] += gy[i];
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gy[i * d + j] * tg[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = gy[i * d + j] * tg[j];
                            g[i * d + j] += rstd[i] * (dxh - m1 - xhat[i * d + j] * m2);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b, pad } => {
                let (cin, h, wd) = dims3(self.value(x)).expect("rank 3");
                let (cout, _, k, _) = dims4(self.value(w)).expect("rank 4");
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let hw = ho * wo;
                if let Some(g) = self.acc(grads, b) {
                    for co in 0..cout {
                        g[co] += gy[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
                let ckk = cin * k * k;
                if self.rg(w) {
                    let cols = im2col(self.value(x).data(), cin, h, wd, k, pad, ho, wo);
                    let g = self.acc(grads, w).expect("requires grad");
                    gemm_nt_acc(gy, &cols, g, cout, hw, ckk);
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm_tn_acc(self.value(w).data(), gy, &mut dcols, cout, ckk, hw);
                    let g = self.acc(grads, x).expect("requires grad");
                    col2im_acc(&dcols, g, cin, h, wd, k, pad, ho, wo);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                let (c, h, w) = dims3(out).expect("rank 3");
                let hw = h * w;
                let tx = self.value(*x).data();
                let tg = self.value(*gamma).data();
                if let Some(g) = self.acc(grads, *x) {
                    for i in 0..c * hw {
                        let ch = i / hw;
                        g[i] += gy[i] * inv_std[ch] * tg[ch];
                    }
                }
                if let Some(g) = self.acc(grads, *gamma) {
                    for i in 0..c * hw {
                        let ch = i / hw;
                        g[ch] += gy[i] * (tx[i] - mean[ch]) * inv_std[ch];
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for i in 0..c * hw {
                        g[i / hw] += gy[i];
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(g) = self.acc(grads, x) {
                    let s = gy[0] / g.len() as f64;
                    g.iter_mut().for_each(|g| *g += s);
                }
            }
        }
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(invalid(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        s => Err(invalid(format!("expected a rank-4 tensor, got {s:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * k * ho * wo];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(c * h + iy) * w + ix - pad];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(cols: &[f64], g: &mut [f64], cin: usize, h: usize, w: usize, k: usize, pad: usize, ho: usize, wo: usize) {
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wo {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        g[(c * h + iy) * w + ix - pad] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1.0; 4]));
        let b = g.input(t(&[4], &[1.0; 4]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn scalar_broadcast_is_allowed() {
        let mut g = Graph::new();
        let a = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.input(Tensor::scalar(2.0));
        let y = g.mul(a, s).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0]);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).unwrap(), &[6.0]);
        assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(a, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin() * 3.0));
        let y = g.softmax_t(x, 1.0).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
