use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcldrError, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use crate::LOG_FLOOR;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistics layers run in training or inference form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-column batch moments produced by a train-mode batchnorm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Tensor),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    Square(Var),
    Exp(Var),
    LogFloor(Var),
    SoftmaxRows(Var),
    Sum(Var),
    SumCols(Var),
    Pick(Var, Vec<usize>),
    Column(Var, usize),
    ConcatCols(Vec<Var>),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reached from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GcldrError::dim(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("shape preserved")
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
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.shape()[1] != bv.shape()[0] {
            return Err(GcldrError::dim(format!(
                "matmul {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::matrix(m, q, matmul_raw(av.data(), bv.data(), m, p, q))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if !xv.is_matrix() || bv.len() != xv.cols() {
            return Err(GcldrError::dim(format!("add_row {:?} + {:?}", xv.shape(), bv.shape())));
        }
        let n = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + bv.data()[i % n]).collect();
        let out = with_data(xv, data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        Ok(with_data(av, av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let av = self.value(a);
        same_shape(av, &c, "mul_const")?;
        let out = with_data(av, av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(x, 1e-12))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::LogFloor(a))
    }

    /// Row-wise softmax of a 2-D tensor, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() {
            return Err(GcldrError::dim(format!("softmax_rows needs 2-D input, got {:?}", av.shape())));
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(av.len());
        for i in 0..av.rows() {
            let row = av.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|x| x / s));
        }
        debug_assert_eq!(data.len(), av.rows() * c);
        let out = with_data(av, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a matrix as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let out = Tensor::matrix(av.rows(), 1, data).expect("nonempty");
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Picks entry `idx[i]` from row `i`, giving an `m×1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() || idx.len() != av.rows() {
            return Err(GcldrError::dim(format!("pick {} indices from {:?}", idx.len(), av.shape())));
        }
        let c = av.cols();
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(GcldrError::Label { label: bad, classes: c });
        }
        let data = idx.iter().enumerate().map(|(i, &j)| av.at(i, j)).collect();
        let out = Tensor::matrix(av.rows(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Pick(a, idx.to_vec()), rg))
    }

    /// Column `j` of a matrix as `m×1`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let av = self.value(a);
        if !av.is_matrix() || j >= av.cols() {
            return Err(GcldrError::dim(format!("column {j} of {:?}", av.shape())));
        }
        let data = (0..av.rows()).map(|i| av.at(i, j)).collect();
        let out = Tensor::matrix(av.rows(), 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Column(a, j), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| GcldrError::dim("concat of nothing"))?;
        let m = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.rows() != m {
                return Err(GcldrError::dim(format!("concat row mismatch {:?}", v.shape())));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Batch normalisation over rows of `x[b×h]` with learnable `gamma`, `beta`.
    ///
    /// Train mode normalises with the biased batch moments and returns them;
    /// infer mode uses `running`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: Option<&BatchStats>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(GcldrError::dim("batchnorm needs 2-D input"));
        }
        let (b, h) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != h || self.value(beta).len() != h {
            return Err(GcldrError::dim("batchnorm scale/shift width"));
        }
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(GcldrError::DegenerateBatch(b));
                }
                let mut mean = vec![0.0; h];
                for i in 0..b {
                    for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; h];
                for i in 0..b {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
            Mode::Infer => {
                let r = running.ok_or_else(|| GcldrError::Contract("infer batchnorm without running stats".into()))?;
                if r.mean.len() != h {
                    return Err(GcldrError::dim("running stats width"));
                }
                (r.mean.clone(), r.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * h);
        for i in 0..b {
            for (j, v) in xv.row(i).iter().enumerate() {
                xhat.push((v - mean[j]) * inv_std[j]);
            }
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(n, z)| g[n % h] * z + be[n % h]).collect();
        let out = Tensor::matrix(b, h, out)?;
        let xhat = Tensor::matrix(b, h, xhat)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train };
        Ok((self.push(out, op, rg), stats))
    }

    /// Inverted dropout: zeroes each unit with probability `rate`, scales
    /// survivors by `1/(1-rate)`. Identity in infer mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GcldrError::config(format!("dropout rate {rate} outside [0,1)")));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let like = self.value(a);
        let mask: Vec<f64> = (0..like.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let mask = with_data(like, mask);
        self.mul_const(a, mask)
    }

    /// Mean negative log-probability of the labelled class, log floored at 1e-12.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.pick(probs, labels)?;
        let lp = self.log_floor(p);
        let m = self.mean(lp);
        Ok(self.scale(m, -1.0))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GcldrError::Contract(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let da = matmul_a_bt(g.data(), bv.data(), m, q, p);
                    self.accumulate(grads, *a, with_data(av, da));
                }
                if self.rg(*b) {
                    let db = matmul_at_b(av.data(), g.data(), m, p, q);
                    self.accumulate(grads, *b, with_data(bv, db));
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let bv = self.value(*bias);
                    let n = bv.len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % n] += v;
                    }
                    self.accumulate(grads, *bias, with_data(bv, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, with_data(g, d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, with_data(g, d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                let d = g.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Swish(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(x, &z)| {
                        let s = sigmoid(z);
                        x * (s + z * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(x, y)| 2.0 * x * y).collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::LogFloor(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(x, &y)| if y > LOG_FLOOR { x / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.len());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    d.extend(y.iter().zip(gy).map(|(p, q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, with_data(g, d));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.shape(), g.data()[0]));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let d = (0..av.len()).map(|n| g.data()[n / c]).collect();
                self.accumulate(grads, *a, with_data(av, d));
            }
            Op::Pick(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *a, with_data(av, d));
            }
            Op::Column(a, j) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for i in 0..av.rows() {
                    d[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *a, with_data(av, d));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for i in 0..pv.rows() {
                            d.extend_from_slice(&g.data()[i * total + start..i * total + start + w]);
                        }
                        self.accumulate(grads, p, with_data(pv, d));
                    }
                    start += w;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (b, h) = (xhat.rows(), xhat.cols());
                let gd = g.data();
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; h];
                    for (n, (gv, z)) in gd.iter().zip(xhat.data()).enumerate() {
                        dg[n % h] += gv * z;
                    }
                    self.accumulate(grads, *gamma, with_data(self.value(*gamma), dg));
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; h];
                    for (n, gv) in gd.iter().enumerate() {
                        db[n % h] += gv;
                    }
                    self.accumulate(grads, *beta, with_data(self.value(*beta), db));
                }
                if self.rg(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let dxhat: Vec<f64> = gd.iter().enumerate().map(|(n, gv)| gv * gamma_v[n % h]).collect();
                    let mut dx = vec![0.0; b * h];
                    if *batch_stats {
                        let mut sum_d = vec![0.0; h];
                        let mut sum_dz = vec![0.0; h];
                        for (n, (dv, z)) in dxhat.iter().zip(xhat.data()).enumerate() {
                            sum_d[n % h] += dv;
                            sum_dz[n % h] += dv * z;
                        }
                        let bf = b as f64;
                        for n in 0..b * h {
                            let j = n % h;
                            dx[n] = inv_std[j] / bf * (bf * dxhat[n] - sum_d[j] - xhat.data()[n] * sum_dz[j]);
                        }
                    } else {
                        for n in 0..b * h {
                            dx[n] = dxhat[n] * inv_std[n % h];
                        }
                    }
                    self.accumulate(grads, *x, with_data(xhat, dx));
                }
            }
        }
    }
}
