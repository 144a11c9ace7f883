//! Wengert-tape reverse-mode differentiation over dense tensors.
//!
//! The primitive set is exactly what the attention captioner needs: linear
//! algebra, the LSTM nonlinearities, max-subtracted softmax, and the three
//! attention divergences. Operations record nodes on a `Tape`; `backward`
//! replays the tape in reverse and accumulates gradients per node.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::tensor::{NodeRef, Tensor};
use crate::error::{Error, Result};

const KL_CLAMP: f64 = 1e-12;

/// Primitive operation codes recordable on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Shape-dispatched product: mat*mat, mat*vec, vec*mat, vec*vec (dot).
    MatMul,
    /// Elementwise addition of same-shape tensors.
    Add,
    /// Add a length-m vector to every column of an m x n matrix.
    AddBroadcastColumn,
    /// Elementwise multiplication of same-shape tensors.
    Mul,
    Tanh,
    Sigmoid,
    /// Concatenation of two vectors.
    Concat,
    /// Max-subtracted softmax per row; a vector is one row.
    RowSoftmax,
    /// Column means of a matrix.
    MeanOverRows,
    /// Sum of absolute differences, scalar output.
    L1Distance,
    /// Sum of squared differences, scalar output.
    L2SquaredDistance,
    /// KL(p || q) = sum p ln(p/q), scalar output.
    KlDivergence,
    /// log softmax(x)[i] of a logit vector, scalar output.
    PickLogProb(usize),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddBroadcastColumn => "add-broadcast-column",
            Primitive::Mul => "elementwise-mul",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Concat => "concat",
            Primitive::RowSoftmax => "row-softmax",
            Primitive::MeanOverRows => "mean-over-rows",
            Primitive::L1Distance => "l1-distance",
            Primitive::L2SquaredDistance => "l2-squared-distance",
            Primitive::KlDivergence => "kl-divergence",
            Primitive::PickLogProb(_) => "pick-log-prob",
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pure forward evaluation of a primitive; no tape interaction.
pub fn eval_primitive(op: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.rank(), b.rank()) {
                (2, 2) => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let (k2, n) = (b.shape()[0], b.shape()[1]);
                    if k != k2 {
                        return Err(Error::ShapeMismatch {
                            op: "matmul",
                            lhs: a.shape().to_vec(),
                            rhs: b.shape().to_vec(),
                        });
                    }
                    let mut out = vec![0.0; m * n];
                    for i in 0..m {
                        for l in 0..k {
                            let av = a.data()[i * k + l];
                            for j in 0..n {
                                out[i * n + j] += av * b.data()[l * n + j];
                            }
                        }
                    }
                    Ok(Tensor::new(vec![m, n], out))
                }
                (2, 1) => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    if k != b.len() {
                        return Err(Error::ShapeMismatch {
                            op: "matmul",
                            lhs: a.shape().to_vec(),
                            rhs: b.shape().to_vec(),
                        });
                    }
                    let mut out = vec![0.0; m];
                    for i in 0..m {
                        let row = &a.data()[i * k..(i + 1) * k];
                        out[i] = row.iter().zip(b.data()).map(|(x, y)| x * y).sum();
                    }
                    Ok(Tensor::vector(out))
                }
                (1, 2) => {
                    let (k, n) = (b.shape()[0], b.shape()[1]);
                    if a.len() != k {
                        return Err(Error::ShapeMismatch {
                            op: "matmul",
                            lhs: a.shape().to_vec(),
                            rhs: b.shape().to_vec(),
                        });
                    }
                    let mut out = vec![0.0; n];
                    for l in 0..k {
                        let av = a.data()[l];
                        for j in 0..n {
                            out[j] += av * b.data()[l * n + j];
                        }
                    }
                    Ok(Tensor::vector(out))
                }
                (1, 1) => {
                    check_same_shape("matmul", a, b)?;
                    let dot = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                    Ok(Tensor::scalar(dot))
                }
                _ => Err(Error::BadShape {
                    op: "matmul",
                    shape: a.shape().to_vec(),
                }),
            }
        }
        Primitive::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            check_same_shape("add", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Ok(Tensor::new(a.shape().to_vec(), data))
        }
        Primitive::AddBroadcastColumn => {
            let (mat, vec) = (inputs[0], inputs[1]);
            if mat.rank() != 2 || vec.rank() != 1 || mat.shape()[0] != vec.len() {
                return Err(Error::ShapeMismatch {
                    op: "add-broadcast-column",
                    lhs: mat.shape().to_vec(),
                    rhs: vec.shape().to_vec(),
                });
            }
            let (m, n) = (mat.shape()[0], mat.shape()[1]);
            let mut data = mat.data().to_vec();
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += vec.data()[i];
                }
            }
            Ok(Tensor::new(vec![m, n], data))
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            check_same_shape("elementwise-mul", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Ok(Tensor::new(a.shape().to_vec(), data))
        }
        Primitive::Tanh => {
            let a = inputs[0];
            let data = a.data().iter().map(|v| v.tanh()).collect();
            Ok(Tensor::new(a.shape().to_vec(), data))
        }
        Primitive::Sigmoid => {
            let a = inputs[0];
            let data = a.data().iter().map(|v| sigmoid(*v)).collect();
            Ok(Tensor::new(a.shape().to_vec(), data))
        }
        Primitive::Concat => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 1 || b.rank() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Ok(Tensor::vector(data))
        }
        Primitive::RowSoftmax => {
            let a = inputs[0];
            match a.rank() {
                1 => Ok(Tensor::vector(softmax_row(a.data()))),
                2 => {
                    let (m, n) = (a.shape()[0], a.shape()[1]);
                    let mut data = Vec::with_capacity(m * n);
                    for i in 0..m {
                        data.extend(softmax_row(&a.data()[i * n..(i + 1) * n]));
                    }
                    Ok(Tensor::new(vec![m, n], data))
                }
                _ => Err(Error::BadShape {
                    op: "row-softmax",
                    shape: a.shape().to_vec(),
                }),
            }
        }
        Primitive::MeanOverRows => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(Error::BadShape {
                    op: "mean-over-rows",
                    shape: a.shape().to_vec(),
                });
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += a.data()[i * n + j];
                }
            }
            for v in &mut out {
                *v /= m as f64;
            }
            Ok(Tensor::vector(out))
        }
        Primitive::L1Distance => {
            let (a, b) = (inputs[0], inputs[1]);
            check_same_shape("l1-distance", a, b)?;
            let s = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum();
            Ok(Tensor::scalar(s))
        }
        Primitive::L2SquaredDistance => {
            let (a, b) = (inputs[0], inputs[1]);
            check_same_shape("l2-squared-distance", a, b)?;
            let s = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok(Tensor::scalar(s))
        }
        Primitive::KlDivergence => {
            let (p, q) = (inputs[0], inputs[1]);
            check_same_shape("kl-divergence", p, q)?;
            if let Some(index) = q.data().iter().position(|v| *v == 0.0) {
                return Err(Error::KlZeroEntry { index });
            }
            // 0 * log(0/q) = 0; q clamped below at 1e-12 as a numerical guard.
            let s = p
                .data()
                .iter()
                .zip(q.data())
                .map(|(pi, qi)| {
                    if *pi == 0.0 {
                        0.0
                    } else {
                        pi * (pi / qi.max(KL_CLAMP)).ln()
                    }
                })
                .sum();
            Ok(Tensor::scalar(s))
        }
        Primitive::PickLogProb(index) => {
            let x = inputs[0];
            if x.rank() != 1 || index >= x.len() {
                return Err(Error::BadShape {
                    op: "pick-log-prob",
                    shape: x.shape().to_vec(),
                });
            }
            let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + x.data()
                    .iter()
                    .map(|v| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            Ok(Tensor::scalar(x.data()[index] - lse))
        }
    }
}

struct Node {
    /// None for leaves.
    op: Option<Primitive>,
    inputs: Vec<usize>,
    /// Saved forward values; inputs are reachable through their own nodes.
    value: Tensor,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Append-only record of a forward computation. Confined to one thread.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf whose gradient will be tracked.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let value = t.detached();
        nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value: value.clone(),
        });
        value.with_node(NodeRef { tape: self.id, id })
    }

    fn node_id(&self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(r) if r.tape == self.id => Ok(r.id),
            Some(_) => Err(Error::ForeignTape),
            // Untracked inputs become leaves so the node list stays topological.
            None => Ok(self.watch(t).node().unwrap().id),
        }
    }

    /// Evaluate a primitive and record the node.
    pub fn apply(&self, op: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let value = eval_primitive(op, inputs)?;
        let input_ids: Vec<usize> = inputs
            .iter()
            .map(|t| self.node_id(t))
            .collect::<Result<_>>()?;
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Some(op),
            inputs: input_ids,
            value: value.clone(),
        });
        Ok(value.with_node(NodeRef { tape: self.id, id }))
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn add_broadcast_column(&self, mat: &Tensor, vec: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::AddBroadcastColumn, &[mat, vec])
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn concat(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Concat, &[a, b])
    }

    pub fn row_softmax(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::RowSoftmax, &[a])
    }

    pub fn mean_over_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MeanOverRows, &[a])
    }

    pub fn l1_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::L1Distance, &[a, b])
    }

    pub fn l2_squared_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::L2SquaredDistance, &[a, b])
    }

    pub fn kl_divergence(&self, p: &Tensor, q: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::KlDivergence, &[p, q])
    }

    pub fn pick_log_prob(&self, logits: &Tensor, index: usize) -> Result<Tensor> {
        self.apply(Primitive::PickLogProb(index), &[logits])
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let c = Tensor::filled(a.shape().to_vec(), factor);
        self.mul(a, &c)
    }

    /// Reverse sweep from a scalar root. Gradients of nodes the root does not
    /// reach are exactly zero.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_id = match root.node() {
            Some(r) if r.tape == self.id => r.id,
            Some(_) => return Err(Error::ForeignTape),
            None => return Err(Error::NonScalarRoot { shape: vec![] }),
        };
        if !root.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if let Some(op) = node.op {
                let in_vals: Vec<&Tensor> =
                    node.inputs.iter().map(|i| &nodes[*i].value).collect();
                let in_grads = backward_primitive(op, &in_vals, &node.value, &g);
                for (slot, ig) in node.inputs.iter().zip(in_grads) {
                    let entry = &mut grads[*slot];
                    match entry {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&ig) {
                                *a += v;
                            }
                        }
                        None => *entry = Some(ig),
                    }
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: self.id,
            shapes,
            grads,
        })
    }
}

/// Per-node gradients of a scalar root.
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// d(root)/d(t). Zero for nodes the root does not reach.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let r = t.node().ok_or(Error::ForeignTape)?;
        if r.tape != self.tape {
            return Err(Error::ForeignTape);
        }
        Ok(self.by_id(r.id))
    }

    pub fn by_id(&self, id: usize) -> Tensor {
        match &self.grads[id] {
            Some(g) => Tensor::new(self.shapes[id].clone(), g.clone()),
            None => Tensor::zeros(self.shapes[id].clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Vector-Jacobian products for each primitive. `out` is the saved forward
/// value, `g` the gradient flowing into it.
fn backward_primitive(op: Primitive, inputs: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
    match op {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            match (a.rank(), b.rank()) {
                (2, 2) => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                da[i * k + l] += gij * b.data()[l * n + j];
                                db[l * n + j] += gij * a.data()[i * k + l];
                            }
                        }
                    }
                    vec![da, db]
                }
                (2, 1) => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k];
                    for i in 0..m {
                        for l in 0..k {
                            da[i * k + l] += g[i] * b.data()[l];
                            db[l] += g[i] * a.data()[i * k + l];
                        }
                    }
                    vec![da, db]
                }
                (1, 2) => {
                    let (k, n) = (b.shape()[0], b.shape()[1]);
                    let mut da = vec![0.0; k];
                    let mut db = vec![0.0; k * n];
                    for l in 0..k {
                        for j in 0..n {
                            da[l] += g[j] * b.data()[l * n + j];
                            db[l * n + j] += g[j] * a.data()[l];
                        }
                    }
                    vec![da, db]
                }
                (1, 1) => {
                    let da = b.data().iter().map(|v| g[0] * v).collect();
                    let db = a.data().iter().map(|v| g[0] * v).collect();
                    vec![da, db]
                }
                _ => unreachable!("forward rejected this shape"),
            }
        }
        Primitive::Add => vec![g.to_vec(), g.to_vec()],
        Primitive::AddBroadcastColumn => {
            let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut dv = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    dv[i] += g[i * n + j];
                }
            }
            vec![g.to_vec(), dv]
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = g.iter().zip(b.data()).map(|(gi, bi)| gi * bi).collect();
            let db = g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect();
            vec![da, db]
        }
        Primitive::Tanh => {
            let dx = g
                .iter()
                .zip(out.data())
                .map(|(gi, yi)| gi * (1.0 - yi * yi))
                .collect();
            vec![dx]
        }
        Primitive::Sigmoid => {
            let dx = g
                .iter()
                .zip(out.data())
                .map(|(gi, yi)| gi * yi * (1.0 - yi))
                .collect();
            vec![dx]
        }
        Primitive::Concat => {
            let split = inputs[0].len();
            vec![g[..split].to_vec(), g[split..].to_vec()]
        }
        Primitive::RowSoftmax => {
            let y = out.data();
            let n = *out.shape().last().unwrap();
            let rows = y.len() / n;
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                for j in 0..n {
                    dx[r * n + j] = ys[j] * (gs[j] - dot);
                }
            }
            vec![dx]
        }
        Primitive::MeanOverRows => {
            let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = g[j] / m as f64;
                }
            }
            vec![dx]
        }
        Primitive::L1Distance => {
            let (a, b) = (inputs[0], inputs[1]);
            // Subgradient at zero difference is zero.
            let s: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| {
                    let d = x - y;
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let da = s.iter().map(|si| si * g[0]).collect();
            let db = s.iter().map(|si| -si * g[0]).collect();
            vec![da, db]
        }
        Primitive::L2SquaredDistance => {
            let (a, b) = (inputs[0], inputs[1]);
            let da: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 2.0 * (x - y) * g[0])
                .collect();
            let db = da.iter().map(|v| -v).collect();
            vec![da, db]
        }
        Primitive::KlDivergence => {
            let (p, q) = (inputs[0], inputs[1]);
            let dp = p
                .data()
                .iter()
                .zip(q.data())
                .map(|(pi, qi)| {
                    if *pi == 0.0 {
                        0.0
                    } else {
                        ((pi / qi.max(KL_CLAMP)).ln() + 1.0) * g[0]
                    }
                })
                .collect();
            let dq = p
                .data()
                .iter()
                .zip(q.data())
                .map(|(pi, qi)| -(pi / qi.max(KL_CLAMP)) * g[0])
                .collect();
            vec![dp, dq]
        }
        Primitive::PickLogProb(index) => {
            let x = inputs[0];
            let sm = softmax_row(x.data());
            let dx = sm
                .iter()
                .enumerate()
                .map(|(j, pj)| {
                    let indicator = if j == index { 1.0 } else { 0.0 };
                    (indicator - pj) * g[0]
                })
                .collect();
            vec![dx]
        }
    }
}
