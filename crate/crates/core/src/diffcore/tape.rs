use std::cell::RefCell;

use super::tensor::{matmul_a_bt_into, matmul_at_b_into, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Relu(usize),
    Neg(usize),
    /// `[rows×n] + [n]` broadcast over rows.
    AddBias(usize, usize),
    /// `[rows×n] ∘ [n]` broadcast over rows.
    MulRow(usize, usize),
    /// Column `j` of a matrix as `[rows×1]`.
    Column(usize, usize),
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation. A tape is built per forward pass and dropped afterwards.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    /// Tape with NaN and domain guards enabled.
    pub fn new() -> Self {
        Self::with_checks(true)
    }

    pub fn with_checks(checked: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            checked,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient (data, sampled noise).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of `{name}`")));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Concatenates `[rows×c_i]` matrices along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].idx].value;
            if first.rank() != 2 {
                return Err(Error::shape("concat_cols", first.shape(), &[]));
            }
            let rows = first.shape()[0];
            let mut total = 0;
            for p in parts {
                let v = &nodes[p.idx].value;
                if v.rank() != 2 || v.shape()[0] != rows {
                    return Err(Error::shape("concat_cols", first.shape(), v.shape()));
                }
                total += v.shape()[1];
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(nodes[p.idx].value.row(r));
                }
            }
            Tensor::raw(vec![rows, total], out)
        };
        self.record(
            "concat_cols",
            value,
            Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.idx];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn op_parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::MulRow(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Softplus(a)
        | Op::Relu(a)
        | Op::Neg(a)
        | Op::Column(a, _) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], idx: usize, contrib: Tensor) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(g) => g.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

/// Adds `g ∘ dfdx(x, y)` to the gradient of the unary op's input.
fn unary(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    out: usize,
    input: usize,
    g: &Tensor,
    dfdx: impl Fn(f64, f64) -> f64,
) {
    if !nodes[input].requires_grad {
        return;
    }
    let x = &nodes[input].value;
    let y = &nodes[out].value;
    let data = g
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&gv, (&xv, &yv))| gv * dfdx(xv, yv))
        .collect();
    accumulate(grads, nodes, input, Tensor::raw(x.shape().to_vec(), data));
}

fn propagate(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(
                    grads,
                    nodes,
                    *a,
                    g.zip_map(vb, "mul", |x, y| x * y).unwrap(),
                );
            }
            if nodes[*b].requires_grad {
                accumulate(
                    grads,
                    nodes,
                    *b,
                    g.zip_map(va, "mul", |x, y| x * y).unwrap(),
                );
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = if vb.rank() == 1 { 1 } else { vb.shape()[1] };
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                matmul_a_bt_into(g.data(), vb.data(), &mut da, m, n, k);
                accumulate(grads, nodes, *a, Tensor::raw(va.shape().to_vec(), da));
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                matmul_at_b_into(va.data(), g.data(), &mut db, m, k, n);
                accumulate(grads, nodes, *b, Tensor::raw(vb.shape().to_vec(), db));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, nodes, *a, g.map(|v| v * c));
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Neg(a) => accumulate(grads, nodes, *a, g.map(|v| -v)),
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(grads, nodes, *a, Tensor::full(nodes[*a].value.shape(), gv));
        }
        Op::Mean(a) => {
            let shape = nodes[*a].value.shape();
            let n = nodes[*a].value.len().max(1) as f64;
            accumulate(grads, nodes, *a, Tensor::full(shape, g.item() / n));
        }
        Op::Square(a) => unary(nodes, grads, idx, *a, g, |x, _| 2.0 * x),
        Op::Sqrt(a) => unary(nodes, grads, idx, *a, g, |_, y| 0.5 / y),
        Op::Exp(a) => unary(nodes, grads, idx, *a, g, |_, y| y),
        Op::Log(a) => unary(nodes, grads, idx, *a, g, |x, _| 1.0 / x),
        Op::Softplus(a) => unary(nodes, grads, idx, *a, g, |x, _| sigmoid(x)),
        Op::Relu(a) => unary(
            nodes,
            grads,
            idx,
            *a,
            g,
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        ),
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*b].requires_grad {
                let cols = nodes[*b].value.len();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks_exact(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(
                    grads,
                    nodes,
                    *b,
                    Tensor::raw(nodes[*b].value.shape().to_vec(), db),
                );
            }
        }
        Op::MulRow(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let cols = vb.len();
            if nodes[*a].requires_grad {
                let data = g
                    .data()
                    .chunks_exact(cols)
                    .flat_map(|row| row.iter().zip(vb.data()).map(|(x, y)| x * y))
                    .collect();
                accumulate(grads, nodes, *a, Tensor::raw(va.shape().to_vec(), data));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; cols];
                for (grow, arow) in g
                    .data()
                    .chunks_exact(cols)
                    .zip(va.data().chunks_exact(cols))
                {
                    for ((d, gv), av) in db.iter_mut().zip(grow).zip(arow) {
                        *d += gv * av;
                    }
                }
                accumulate(grads, nodes, *b, Tensor::raw(vb.shape().to_vec(), db));
            }
        }
        Op::Column(a, j) => {
            let va = &nodes[*a].value;
            let cols = va.shape()[1];
            let mut da = vec![0.0; va.len()];
            for (r, gv) in g.data().iter().enumerate() {
                da[r * cols + j] = *gv;
            }
            accumulate(grads, nodes, *a, Tensor::raw(va.shape().to_vec(), da));
        }
        Op::ConcatCols(parts) => {
            let total = g.shape()[1];
            let rows = g.shape()[0];
            let mut offset = 0;
            for &p in parts {
                let width = nodes[p].value.shape()[1];
                if nodes[p].requires_grad {
                    let mut dp = Vec::with_capacity(rows * width);
                    for r in 0..rows {
                        dp.extend_from_slice(
                            &g.data()[r * total + offset..r * total + offset + width],
                        );
                    }
                    accumulate(grads, nodes, p, Tensor::raw(vec![rows, width], dp));
                }
                offset += width;
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.tape.nodes.borrow()[var.idx].value.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    /// Value of a scalar (one-element) node.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v.item())
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx]
                .value
                .zip_map(&nodes[other.idx].value, name, f)?
        };
        self.tape.record(name, value, op)
    }

    fn elementwise(self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.with_value(|v| v.map(f));
        self.tape.record(name, value, op)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.idx, other.idx), |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.idx, other.idx), |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.idx, other.idx), |a, b| a * b)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.matmul(&nodes[other.idx].value)?
        };
        self.tape
            .record("matmul", value, Op::MatMul(self.idx, other.idx))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.elementwise("scale", Op::Scale(self.idx, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.elementwise("add_scalar", Op::AddScalar(self.idx), |v| v + c)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Result<Var<'t>> {
        self.elementwise("neg", Op::Neg(self.idx), |v| -v)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = self.with_value(|v| Tensor::scalar(v.sum()));
        self.tape.record("sum", value, Op::Sum(self.idx))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let value = self.with_value(|v| Tensor::scalar(v.sum() / v.len().max(1) as f64));
        self.tape.record("mean", value, Op::Mean(self.idx))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.elementwise("square", Op::Square(self.idx), |v| v * v)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.check_positive("sqrt")?;
        self.elementwise("sqrt", Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.elementwise("exp", Op::Exp(self.idx), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.check_positive("log")?;
        self.elementwise("log", Op::Log(self.idx), f64::ln)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.elementwise("softplus", Op::Softplus(self.idx), softplus)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.elementwise("relu", Op::Relu(self.idx), |v| v.max(0.0))
    }

    /// `self[rows×n] + bias[n]`, bias broadcast over rows.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = self.row_broadcast(bias, "add_bias", |a, b| a + b)?;
        self.tape
            .record("add_bias", value, Op::AddBias(self.idx, bias.idx))
    }

    /// `self[rows×n] ∘ row[n]`, row broadcast over rows.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = self.row_broadcast(row, "mul_row", |a, b| a * b)?;
        self.tape
            .record("mul_row", value, Op::MulRow(self.idx, row.idx))
    }

    pub fn column(self, j: usize) -> Result<Var<'t>> {
        let value = self.with_value(|v| {
            if v.rank() != 2 || j >= v.shape()[1] {
                return Err(Error::invalid(format!(
                    "column {j} out of range for shape {:?}",
                    v.shape()
                )));
            }
            let cols = v.shape()[1];
            let data = v.data().iter().skip(j).step_by(cols).copied().collect();
            Ok(Tensor::raw(vec![v.shape()[0], 1], data))
        })?;
        self.tape.record("column", value, Op::Column(self.idx, j))
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.idx].value, &nodes[row.idx].value);
        if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let cols = b.len();
        let data = a
            .data()
            .chunks_exact(cols.max(1))
            .flat_map(|r| r.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::raw(a.shape().to_vec(), data))
    }

    fn check_positive(&self, op: &'static str) -> Result<()> {
        if !self.tape.checked {
            return Ok(());
        }
        self.with_value(|v| match v.data().iter().find(|&&x| x <= 0.0) {
            Some(bad) => Err(Error::Domain {
                op,
                detail: format!("non-positive input {bad}"),
            }),
            None => Ok(()),
        })
    }
}
