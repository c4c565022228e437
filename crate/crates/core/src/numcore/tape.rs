//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//! Gradients accumulate across calls until [`Tape::zero_grad`].

use std::cell::RefCell;

use super::tensor::{check_temperature, kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Silu(usize),
    SoftmaxRows(usize, f64),
    CausalSoftmax(usize, f64),
    RmsNormRows(usize, f64),
    L2NormalizeRows(usize),
    LogSumExpRows(usize),
    Column(usize, usize),
    MulColumn(usize, usize),
    PickPerRow(usize, Vec<usize>),
    Row(usize, usize),
    ConcatRows(Vec<usize>),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Single-writer operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf honoring `tensor.requires_grad`.
    pub fn var(&self, tensor: &Tensor) -> Var<'_> {
        let mut value = tensor.clone();
        let requires_grad = value.requires_grad;
        value.grad = None;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        let mut v = tensor.clone();
        v.requires_grad = true;
        self.var(&v)
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        let mut v = tensor.clone();
        v.requires_grad = false;
        self.var(&v)
    }

    /// Takes ownership to avoid a copy for large constants.
    pub fn constant_owned(&self, mut tensor: Tensor) -> Var<'_> {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        value.requires_grad = requires_grad;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::invalid("variable belongs to a different tape"))
        }
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_owner(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let contributions = vjp(&nodes, id, &g);
            for (input, dg) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    /// Accumulates a leaf's gradient into `target.grad`.
    pub fn write_grad(&self, var: Var<'_>, target: &mut Tensor) {
        if let Some(g) = var.grad() {
            let g = g.into_data();
            match &mut target.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => target.grad = Some(g),
            }
        }
    }

    fn unary(&self, a: Var<'_>, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(&[a.id]);
        self.push(value, op, rg)
    }
}

fn shape_of(nodes: &[Node], id: usize) -> (usize, usize) {
    nodes[id].value.dims2().unwrap_or((1, nodes[id].value.len()))
}

/// Vector-Jacobian products of node `id` for upstream gradient `g`.
fn vjp(nodes: &[Node], id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = shape_of(nodes, *a);
            let (_, n) = shape_of(nodes, *b);
            let mut v = Vec::new();
            if nodes[*a].requires_grad {
                // dA = G B^T
                v.push((*a, kernels::matmul_nt(g, val(*b), m, n, k)));
            }
            if nodes[*b].requires_grad {
                // dB = A^T G
                v.push((*b, kernels::matmul_tn(val(*a), g, m, k, n)));
            }
            v
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = shape_of(nodes, *a);
            let (n, _) = shape_of(nodes, *b);
            let mut v = Vec::new();
            if nodes[*a].requires_grad {
                // dA = G B
                v.push((*a, kernels::matmul(g, val(*b), m, n, k)));
            }
            if nodes[*b].requires_grad {
                // dB = G^T A
                v.push((*b, kernels::matmul_tn(g, val(*a), m, n, k)));
            }
            v
        }
        Op::Transpose(a) => {
            let (m, n) = shape_of(nodes, *a);
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = g[j * m + i];
                }
            }
            vec![(*a, d)]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
        Op::Mul(a, b) => vec![
            (*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()),
            (*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()),
        ],
        Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
        Op::Exp(a) => vec![(*a, g.iter().zip(out.data()).map(|(x, y)| x * y).collect())],
        Op::Ln(a) => vec![(*a, g.iter().zip(val(*a)).map(|(x, y)| x / y).collect())],
        Op::Silu(a) => {
            let d = g
                .iter()
                .zip(val(*a))
                .map(|(gi, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    gi * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![(*a, d)]
        }
        Op::SoftmaxRows(a, t) | Op::CausalSoftmax(a, t) => {
            let (m, n) = shape_of(nodes, *a);
            let p = out.data();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let dot: f64 = g[r.clone()].iter().zip(&p[r.clone()]).map(|(x, y)| x * y).sum();
                for j in r {
                    d[j] = p[j] * (g[j] - dot) / t;
                }
            }
            vec![(*a, d)]
        }
        Op::RmsNormRows(a, eps) => {
            let (m, n) = shape_of(nodes, *a);
            let x = val(*a);
            let y = out.data();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let ms = x[r.clone()].iter().map(|v| v * v).sum::<f64>() / n as f64;
                let rms = (ms + eps).sqrt();
                let gy: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(p, q)| p * q).sum();
                for j in r {
                    d[j] = (g[j] - y[j] * gy / n as f64) / rms;
                }
            }
            vec![(*a, d)]
        }
        Op::L2NormalizeRows(a) => {
            let (m, n) = shape_of(nodes, *a);
            let x = val(*a);
            let y = out.data();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let r = i * n..(i + 1) * n;
                let norm = x[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                let gy: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(p, q)| p * q).sum();
                for j in r {
                    d[j] = (g[j] - y[j] * gy) / norm;
                }
            }
            vec![(*a, d)]
        }
        Op::LogSumExpRows(a) => {
            let (m, n) = shape_of(nodes, *a);
            let x = val(*a);
            let lse = out.data();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let k = i * n + j;
                    d[k] = g[i] * (x[k] - lse[i]).exp();
                }
            }
            vec![(*a, d)]
        }
        Op::Column(a, col) => {
            let (m, n) = shape_of(nodes, *a);
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n + col] = g[i];
            }
            vec![(*a, d)]
        }
        Op::MulColumn(a, c) => {
            let (m, n) = shape_of(nodes, *a);
            let av = val(*a);
            let cv = val(*c);
            let mut da = vec![0.0; m * n];
            let mut dc = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    let k = i * n + j;
                    da[k] = g[k] * cv[i];
                    dc[i] += g[k] * av[k];
                }
            }
            vec![(*a, da), (*c, dc)]
        }
        Op::PickPerRow(a, idx) => {
            let (m, n) = shape_of(nodes, *a);
            let mut d = vec![0.0; m * n];
            for (i, &j) in idx.iter().enumerate() {
                d[i * n + j] = g[i];
            }
            vec![(*a, d)]
        }
        Op::Row(a, row) => {
            let (m, n) = shape_of(nodes, *a);
            let mut d = vec![0.0; m * n];
            d[row * n..(row + 1) * n].copy_from_slice(g);
            vec![(*a, d)]
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            ids.iter()
                .map(|&i| {
                    let len = nodes[i].value.len();
                    let piece = g[offset..offset + len].to_vec();
                    offset += len;
                    (i, piece)
                })
                .collect()
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; nodes[*a].value.len()])],
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        let mut v = self.tape.nodes.borrow()[self.id].value.clone();
        v.requires_grad = false;
        v
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` if the leaf never received one.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Copy of this value that the tape treats as a constant.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_owned(self.value())
    }

    fn dims(&self) -> Result<(usize, usize)> {
        self.with_value(|t| t.dims2())
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        self.tape.check_owner(*other)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (m, k) = self.dims()?;
        let (k2, n) = other.dims()?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul: inner dimensions differ ({m}x{k} by {k2}x{n})"
            )));
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul(nodes[self.id].value.data(), nodes[other.id].value.data(), m, k, n)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], data)?,
            Op::MatMul(self.id, other.id),
            rg,
        ))
    }

    /// `self [m x k]` times the transpose of `other [n x k]`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (m, k) = self.dims()?;
        let (n, k2) = other.dims()?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul_t: inner dimensions differ ({m}x{k} by ({n}x{k2})^T)"
            )));
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            kernels::matmul_nt(nodes[self.id].value.data(), nodes[other.id].value.data(), m, k, n)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], data)?,
            Op::MatMulNt(self.id, other.id),
            rg,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.with_value(|t| t.transpose())?;
        Ok(self.tape.unary(*self, v, Op::Transpose(self.id)))
    }

    fn zip(&self, other: &Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "{name}: shapes differ ({:?} vs {:?})",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "mul", |a, b| a * b)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.with_value(|t| t.scale(c));
        self.tape.unary(*self, v, Op::Scale(self.id, c))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.with_value(|t| t.map(f64::exp));
        self.tape.unary(*self, v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        if self.with_value(|t| t.data().iter().any(|&v| v <= 0.0)) {
            return Err(Error::invalid("ln of a non-positive value"));
        }
        let v = self.with_value(|t| t.map(f64::ln));
        Ok(self.tape.unary(*self, v, Op::Ln(self.id)))
    }

    pub fn silu(&self) -> Var<'t> {
        let v = self.with_value(|t| t.map(|x| x / (1.0 + (-x).exp())));
        self.tape.unary(*self, v, Op::Silu(self.id))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        let v = self.with_value(|t| super::tensor::softmax_rows(t, temperature))?;
        Ok(self.tape.unary(*self, v, Op::SoftmaxRows(self.id, temperature)))
    }

    /// Softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let (m, n) = self.dims()?;
        if m != n {
            return Err(Error::invalid(format!("causal_softmax needs a square matrix, got {m}x{n}")));
        }
        let mut data = self.with_value(|t| t.data().to_vec());
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            kernels::softmax_in_place(&mut row[..=i], temperature);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.tape.unary(*self, v, Op::CausalSoftmax(self.id, temperature)))
    }

    /// Root-mean-square normalization of each row (no learned gain).
    pub fn rms_norm_rows(&self, eps: f64) -> Result<Var<'t>> {
        let (m, n) = self.dims()?;
        let mut data = self.with_value(|t| t.data().to_vec());
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / n as f64 + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= rms);
        }
        let v = Tensor::new(self.shape(), data)?;
        Ok(self.tape.unary(*self, v, Op::RmsNormRows(self.id, eps)))
    }

    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let (m, n) = self.dims()?;
        let mut data = self.with_value(|t| t.data().to_vec());
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "cannot L2-normalize row {i} with norm {norm}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let v = Tensor::new(self.shape(), data)?;
        Ok(self.tape.unary(*self, v, Op::L2NormalizeRows(self.id)))
    }

    /// Stabilized `log(sum(exp(row)))` for each row, giving `m x 1`.
    pub fn log_sum_exp_rows(&self) -> Result<Var<'t>> {
        let (m, n) = self.dims()?;
        let data = self.with_value(|t| {
            (0..m)
                .map(|i| kernels::log_sum_exp(&t.data()[i * n..(i + 1) * n]))
                .collect::<Vec<_>>()
        });
        let v = Tensor::new(vec![m, 1], data)?;
        Ok(self.tape.unary(*self, v, Op::LogSumExpRows(self.id)))
    }

    pub fn column(&self, col: usize) -> Result<Var<'t>> {
        let (m, n) = self.dims()?;
        if col >= n {
            return Err(Error::invalid(format!("column {col} out of range for {n} columns")));
        }
        let data = self.with_value(|t| (0..m).map(|i| t.data()[i * n + col]).collect());
        let v = Tensor::new(vec![m, 1], data)?;
        Ok(self.tape.unary(*self, v, Op::Column(self.id, col)))
    }

    /// Scales row `i` of `self` by entry `i` of the column vector `c`.
    pub fn mul_column(&self, c: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(c)?;
        let (m, n) = self.dims()?;
        let (cm, cn) = c.dims()?;
        if cm != m || cn != 1 {
            return Err(Error::invalid(format!("mul_column: {m}x{n} by {cm}x{cn}")));
        }
        let mut data = self.with_value(|t| t.data().to_vec());
        c.with_value(|cv| {
            for i in 0..m {
                data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= cv.data()[i]);
            }
        });
        let rg = self.tape.requires(&[self.id, c.id]);
        Ok(self.tape.push(Tensor::new(vec![m, n], data)?, Op::MulColumn(self.id, c.id), rg))
    }

    /// Gathers `self[i, idx[i]]` into an `m x 1` column.
    pub fn pick_per_row(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (m, n) = self.dims()?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::invalid("pick_per_row: index list does not fit the matrix"));
        }
        let data = self.with_value(|t| idx.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect());
        let v = Tensor::new(vec![m, 1], data)?;
        Ok(self.tape.unary(*self, v, Op::PickPerRow(self.id, idx.to_vec())))
    }

    pub fn row(&self, row: usize) -> Result<Var<'t>> {
        let (m, n) = self.dims()?;
        if row >= m {
            return Err(Error::invalid(format!("row {row} out of range for {m} rows")));
        }
        let data = self.with_value(|t| t.data()[row * n..(row + 1) * n].to_vec());
        let v = Tensor::new(vec![1, n], data)?;
        Ok(self.tape.unary(*self, v, Op::Row(self.id, row)))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let tape = first.tape;
        let n = first.dims()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            tape.check_owner(*p)?;
            let (m, pn) = p.dims()?;
            if pn != n {
                return Err(Error::invalid(format!("concat_rows: {pn} columns, expected {n}")));
            }
            rows += m;
            p.with_value(|t| data.extend_from_slice(t.data()));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(ids), rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.with_value(|t| t.data().iter().sum());
        self.tape.unary(*self, Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with_value(|t| t.len()) as f64;
        self.sum().scale(1.0 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
        tape.param(&Tensor::vector(v.to_vec()))
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[1.0, 2.0, 3.0]);
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[1.0, 2.0, 3.0]);
        let loss = x.mul(&x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[1.0, 2.0]);
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detached_path_gets_no_grad() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[1.0, 2.0]);
        let y = vec_var(&tape, &[3.0, 4.0]);
        let loss = x.detach().mul(&y).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(y.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_untouched() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[1.0]);
        let stray = vec_var(&tape, &[5.0]);
        tape.backward(x.scale(3.0).sum()).unwrap();
        assert!(stray.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = vec_var(&tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matmul_grads_by_hand() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = tape.param(&Tensor::from_rows(&[[5.0], [6.0]]).unwrap());
        let loss = a.matmul(&b).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(b.grad().unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::new();
        let s = tape.constant(&Tensor::from_rows(&[[1.0, 9.0], [0.0, 0.0]]).unwrap());
        let p = s.causal_softmax(1.0).unwrap().value();
        assert_eq!(p.data(), &[1.0, 0.0, 0.5, 0.5]);
    }
}
