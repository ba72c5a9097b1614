//! Define-by-run tape for reverse-mode differentiation.
//!
//! Tensors entering the graph are widened to `f64`; every node value and
//! every gradient is held in `f64` and narrowed back to `f32` only when read
//! out through [`Graph::value`] or [`Gradients::get`]. Node ids are assigned
//! in creation order, so inputs always precede their consumers and the tape
//! is acyclic by construction.

use std::ops::Range;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    GeluTanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `m×n` plus a length-`n` row broadcast.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c = aᵀ · b` for `a: k×m`, `b: k×n`.
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that follows the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, t.requires_grad())
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, false)
    }

    /// Leaf that is always differentiated.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, true)
    }

    pub fn constant_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() || shape.contains(&0) {
            return Err(Error::dim("constant", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn param_f64(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() || shape.contains(&0) {
            return Err(Error::dim("param", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, true))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Node value narrowed to `f32`.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.iter().map(|&x| x as f32).collect())
            .expect("graph shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v).shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let value = mm(&self.node(a).value, &self.node(b).value, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let value = mm_nt(&self.node(a).value, &self.node(b).value, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMulNt(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let value = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.node(row).value.len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let xv = &self.node(x).value;
        let rv = &self.node(row).value;
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            value.extend(xv[i * n..(i + 1) * n].iter().zip(rv).map(|(a, b)| a + b));
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(vec![m, n], value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.node(x).value.iter().map(|v| v * factor).collect();
        let rg = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, factor), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.node(x).value.iter().map(|&v| f(v)).collect();
        let rg = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_tanh, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (kind, inputs) {
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            (Elementwise::Mul, &[a, b]) => self.mul(a, b),
            (Elementwise::Relu, &[x]) => Ok(self.relu(x)),
            (Elementwise::GeluTanh, &[x]) => Ok(self.gelu(x)),
            (kind, inputs) => Err(Error::Contract(format!(
                "{kind:?} does not take {} operand(s)",
                inputs.len()
            ))),
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let xv = &self.node(x).value;
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows input contains NaN".into()));
        }
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(vec![m, n], value, Op::SoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.node(gain).value.len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.node(bias).value.len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(bias)));
        }
        let xv = &self.node(x).value;
        let g = &self.node(gain).value;
        let b = &self.node(bias).value;
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                value[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            vec![m, n],
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice")?;
        if rows.start >= rows.end || rows.end > m || cols.start >= cols.end || cols.end > n {
            return Err(Error::Contract(format!(
                "slice rows {rows:?} cols {cols:?} out of bounds for {m}×{n}"
            )));
        }
        let xv = &self.node(x).value;
        let mut value = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            value.extend_from_slice(&xv[i * n + cols.start..i * n + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        let rg = self.needs(&[x]);
        Ok(self.push(shape, value, Op::Slice { x, rows, cols }, rg))
    }

    pub fn rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let (_, n) = self.dims2(x, "rows")?;
        self.slice(x, rows, 0..n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            m += pm;
        }
        let mut value = Vec::with_capacity(m * n);
        for &p in parts {
            value.extend_from_slice(&self.node(p).value);
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![m, n], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.node(p).value[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![m, n], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.node(x).value.iter().sum();
        let rg = self.needs(&[x]);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.node(x).value;
        let total = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[x]);
        self.push(vec![1], vec![total], Op::Mean(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Target(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        let lv = &self.node(logits).value;
        if lv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("cross_entropy logits contain NaN".into()));
        }
        let mut probs = vec![0.0; m * k];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[i]];
        }
        loss /= m as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target of the same size.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = &self.node(pred).value;
        if pv.len() != target.len() {
            return Err(Error::dim("l1_loss", self.shape(pred), &[target.len()]));
        }
        let loss = pv.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pv.len() as f64;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(a) {
                    // dA = dC · Bᵀ
                    let da = mm_nt(g, &self.node(*b).value, m, n, k);
                    accumulate(&mut grads[a.0], da);
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    let db = mm_tn(&self.node(*a).value, g, m, k, n);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if wants(a) {
                    // dA = dC · B
                    let da = mm(g, &self.node(*b).value, m, n, k);
                    accumulate(&mut grads[a.0], da);
                }
                if wants(b) {
                    // dB = dCᵀ · A
                    let db = mm_tn(g, &self.node(*a).value, m, n, k);
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if wants(a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddRow(x, row) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if wants(row) {
                    let n = self.node(*row).value.len();
                    accumulate_with(&mut grads[row.0], n, |buf| {
                        for chunk in g.chunks(n) {
                            buf.iter_mut().zip(chunk).for_each(|(b, c)| *b += c);
                        }
                    });
                }
            }
            Op::Scale(x, f) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| v * f).collect());
                }
            }
            Op::Relu(x) => {
                if wants(x) {
                    let xv = &self.node(*x).value;
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let xv = &self.node(*x).value;
                    let d = g.iter().zip(xv).map(|(g, &x)| g * gelu_tanh_grad(x)).collect();
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Tanh(x) => {
                if wants(x) {
                    let d = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(x) {
                    let n = node.shape[1];
                    let mut d = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(node.value.chunks(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.shape[1];
                let gv = &self.node(*gain).value;
                if wants(x) {
                    let mut d = vec![0.0; g.len()];
                    for (i, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for j in 0..n {
                            drow[j] = rstd[i] / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                if wants(gain) {
                    accumulate_with(&mut grads[gain.0], n, |buf| {
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                buf[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if wants(bias) {
                    accumulate_with(&mut grads[bias.0], n, |buf| {
                        for grow in g.chunks(n) {
                            buf.iter_mut().zip(grow).for_each(|(b, g)| *b += g);
                        }
                    });
                }
            }
            Op::Slice { x, rows, cols } => {
                if wants(x) {
                    let n = self.shape(*x)[1];
                    let len = self.node(*x).value.len();
                    let w = cols.len();
                    accumulate_with(&mut grads[x.0], len, |buf| {
                        for (r, i) in rows.clone().enumerate() {
                            let dst = &mut buf[i * n + cols.start..i * n + cols.end];
                            dst.iter_mut()
                                .zip(&g[r * w..(r + 1) * w])
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.node(*p).value.len();
                    if wants(p) {
                        accumulate(&mut grads[p.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(self.node(*p).value.len());
                        for row in g.chunks(n) {
                            d.extend_from_slice(&row[col..col + w]);
                        }
                        accumulate(&mut grads[p.0], d);
                    }
                    col += w;
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    let len = self.node(*x).value.len();
                    accumulate(&mut grads[x.0], vec![g[0]; len]);
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let len = self.node(*x).value.len();
                    accumulate(&mut grads[x.0], vec![g[0] / len as f64; len]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(logits) {
                    let k = self.shape(*logits)[1];
                    let m = targets.len() as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / m).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * k + t] -= g[0] / m;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::L1 { pred, target } => {
                if wants(pred) {
                    let pv = &self.node(*pred).value;
                    let n = pv.len() as f64;
                    let d = pv
                        .iter()
                        .zip(target)
                        .map(|(p, t)| {
                            let diff = p - t;
                            if diff > 0.0 {
                                g[0] / n
                            } else if diff < 0.0 {
                                -g[0] / n
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads[pred.0], d);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get_f64(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient narrowed to `f32`; `None` if `v` is not on a differentiable
    /// path to the loss.
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let g = self.get_f64(v)?;
        Some(
            Tensor::new(graph.shape(v).to_vec(), g.iter().map(|&x| x as f32).collect())
                .expect("gradient shape matches node"),
        )
    }

    /// Fills `tensor`'s grad slot. Unreached parameters receive zeros.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let grad = match self.get_f64(v) {
            Some(g) => g.iter().map(|&x| x as f32).collect(),
            None => vec![0.0; tensor.numel()],
        };
        tensor.set_grad(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[0.3, -1.5, 2.0, 7.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[0.3, -1.5, 2.0, 7.0]);

        let a = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(&t(&[2, 1], &[0.0, 1.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(out), &[2, 1]);
        assert_eq!(g.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros([2, 3]));
        let b = g.constant(&Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(&Tensor::zeros([3]));
        let s = g.elementwise(Elementwise::Add, &[x, z]).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());
        let zero = g.constant(&Tensor::zeros([1]));
        let ge = g.gelu(zero);
        assert_eq!(g.value(ge).data(), &[0.0]);
        assert!(g.elementwise(Elementwise::Relu, &[x, z]).is_err());
        let other = g.constant(&Tensor::zeros([4]));
        assert!(g.add(x, other).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 4], &[0.7; 4]));
        let s = g.softmax_rows(x).unwrap();
        for v in g.value_f64(s) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x = g
            .constant_f64(vec![1, 2], vec![0.0, 3f64.ln()])
            .unwrap();
        let s = g.softmax_rows(x).unwrap();
        let v = g.value_f64(s);
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

        let x = g.constant(&t(&[1, 2], &[1000.0, 0.0]));
        let s = g.softmax_rows(x).unwrap();
        let v = g.value_f64(s);
        assert!(v.iter().all(|v| v.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12);

        let x = g.constant(&t(&[1, 2], &[f32::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(&Tensor::full([2], 1.0));
        let zeros = g.constant(&Tensor::zeros([2]));
        let c = g.constant(&t(&[1, 2], &[4.0, 4.0]));
        let y = g.layer_norm(c, ones, zeros, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(&t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-6).unwrap();
        let v = g.value_f64(y);
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);

        let bias = g.constant(&t(&[2], &[0.5, -2.0]));
        let y = g.layer_norm(x, zeros, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0]);

        assert!(g.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_fn([2, 3], |i| i as f32 - 2.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get_f64(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get_f64(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros([2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(&Tensor::full([2, 2], 1.0));
        let x = g.param(&Tensor::full([1, 2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get_f64(w).is_none());
        assert_eq!(grads.get_f64(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_and_l1_values() {
        let mut g = Graph::new();
        let logits = g.constant(&t(&[1, 2], &[2.0, 0.0]));
        let l = g.cross_entropy(logits, &[0]).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.scalar(l).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.1269).abs() < 1e-4);
        assert!(matches!(g.cross_entropy(logits, &[2]), Err(Error::Target(_))));

        let p = g.constant(&t(&[2], &[1.0, -1.0]));
        let l = g.l1_loss(p, &[1.0, -1.0]).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }
}
