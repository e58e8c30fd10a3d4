//! Computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order and evaluated eagerly, so a graph
//! always holds a consistent forward state. The op catalog is fixed: add, sub,
//! elementwise mul, matmul, conv2d, relu, maxpool2, global-avg-pool, dot,
//! l2-norm, scalar-div, log-softmax, gather, sum, scale. All arithmetic is f64
//! with fixed summation order, so identical inputs give bit-identical outputs.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding preserving spatial size; odd kernel sides only.
    Same,
    /// No padding; output shrinks by kernel size minus one.
    Valid,
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf: a rebindable named placeholder or an anonymous constant. The
    /// graph's input registry tracks which is which.
    Input,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { padding: Padding, has_bias: bool },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Dot,
    /// Euclidean norm of a vector, clamped below at `floor`.
    L2Norm { floor: f64 },
    /// Elementwise division of the first input by a scalar second input.
    ScalarDiv,
    LogSoftmax,
    Gather { index: usize },
    Sum,
    Scale { factor: f64 },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input { .. } => "input",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::MatMul => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu => "relu",
        Op::MaxPool2 => "maxpool2",
        Op::GlobalAvgPool => "global-avg-pool",
        Op::Dot => "dot",
        Op::L2Norm { .. } => "l2-norm",
        Op::ScalarDiv => "scalar-div",
        Op::LogSoftmax => "log-softmax",
        Op::Gather { .. } => "gather",
        Op::Sum => "sum",
        Op::Scale { .. } => "scale",
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Per-node gradients of one scalar loss. Nodes the loss does not reach
/// keep all-zero gradients.
pub struct GradientMap {
    grads: Vec<Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad check: step {:e}, tolerance {:e}",
            self.step, self.tolerance
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:12} max rel err {:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}) {}",
                e.input,
                e.max_rel_err,
                e.worst_index,
                e.analytic_at_worst,
                e.numeric_at_worst,
                if e.pass { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Relative error with an absolute floor so near-zero gradient pairs compare
/// against 1e-6 instead of each other.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs_by_name: BTreeMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.nodes[id.0].value.scalar_value()
    }

    /// Adds a named placeholder leaf bound to an initial value.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.inputs_by_name.contains_key(name) {
            return Err(Error::DuplicateInput(name.to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            inputs: vec![],
            value,
        });
        self.inputs_by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds an unnamed constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Input, inputs: vec![], value });
        id
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn conv2d(
        &mut self,
        image: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: Padding,
    ) -> Result<NodeId> {
        let mut inputs = vec![image, kernel];
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(Op::Conv2d { padding, has_bias }, inputs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MaxPool2, vec![x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::GlobalAvgPool, vec![x])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Dot, vec![a, b])
    }

    pub fn l2_norm(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.push(Op::L2Norm { floor }, vec![x])
    }

    pub fn scalar_div(&mut self, numer: NodeId, denom: NodeId) -> Result<NodeId> {
        self.push(Op::ScalarDiv, vec![numer, denom])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![x])
    }

    pub fn gather(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.push(Op::Gather { index }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale { factor }, vec![x])
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    /// Rebinds named leaves and recomputes every node in order. Returns the
    /// tensors marked as outputs.
    pub fn evaluate(&mut self, bindings: &[(&str, Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        for (name, value) in bindings {
            let id = *self
                .inputs_by_name
                .get(*name)
                .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
            let current = self.nodes[id.0].value.shape();
            if current != value.shape() {
                return Err(Error::ShapeMismatch {
                    node: id.0,
                    op: "input".to_string(),
                    detail: format!(
                        "cannot rebind {:?}: placeholder shape {:?}, new value {:?}",
                        name,
                        current,
                        value.shape()
                    ),
                });
            }
            self.nodes[id.0].value = value.clone();
        }
        self.recompute_all()?;
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            out.insert(name.clone(), self.nodes[id.0].value.clone());
        }
        Ok(out)
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss { node: loss.0, shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Tensor> =
            self.nodes.iter().map(|n| Tensor::zeros(n.value.shape())).collect();
        grads[loss.0].data_mut()[0] = 1.0;
        let mut reached = vec![false; self.nodes.len()];
        reached[loss.0] = true;

        for i in (0..=loss.0).rev() {
            if !reached[i] {
                continue;
            }
            let node = &self.nodes[i];
            if !grads[i].all_finite() {
                return Err(Error::NonFiniteGradient { node: i, op: op_name(&node.op).to_string() });
            }
            for id in &node.inputs {
                reached[id.0] = true;
            }
            let (head, tail) = grads.split_at_mut(i);
            let g = &tail[0];
            propagate(node, &self.nodes, g, head);
        }
        Ok(GradientMap { grads })
    }

    /// Compares `backward` against central finite differences for every named
    /// input. Errors if the graph sits on a kink (relu input within `step` of
    /// zero, a near-tied pool window, or an l2-norm at its clamp).
    pub fn grad_check(
        &mut self,
        loss: NodeId,
        step: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        if !(step > 0.0) {
            return Err(Error::InvalidStep(step));
        }
        self.detect_kinks(step)?;
        let analytic = self.backward(loss)?;

        let inputs: Vec<(String, NodeId)> =
            self.inputs_by_name.iter().map(|(n, id)| (n.clone(), *id)).collect();
        let mut entries = Vec::with_capacity(inputs.len());
        for (name, id) in inputs {
            let numel = self.nodes[id.0].value.numel();
            let mut max_rel = 0.0;
            let mut worst = 0usize;
            let mut worst_pair = (0.0, 0.0);
            for j in 0..numel {
                let original = self.nodes[id.0].value.data()[j];
                self.nodes[id.0].value.data_mut()[j] = original + step;
                self.recompute_all()?;
                let plus = self.nodes[loss.0].value.data()[0];
                self.nodes[id.0].value.data_mut()[j] = original - step;
                self.recompute_all()?;
                let minus = self.nodes[loss.0].value.data()[0];
                self.nodes[id.0].value.data_mut()[j] = original;

                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic.get(id).data()[j];
                let rel = relative_error(a, numeric);
                if rel > max_rel {
                    max_rel = rel;
                    worst = j;
                    worst_pair = (a, numeric);
                }
            }
            entries.push(GradCheckEntry {
                input: name,
                max_rel_err: max_rel,
                worst_index: worst,
                analytic_at_worst: worst_pair.0,
                numeric_at_worst: worst_pair.1,
                pass: !(max_rel > tolerance),
            });
        }
        // Leave the graph in its unperturbed forward state.
        self.recompute_all()?;
        Ok(GradCheckReport { step, tolerance, entries })
    }

    fn detect_kinks(&self, step: f64) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    if let Some(j) = x.data().iter().position(|v| v.abs() <= step) {
                        return Err(Error::DegeneratePoint {
                            node: i,
                            op: "relu".to_string(),
                            detail: format!("input entry {} is {} (within step)", j, x.data()[j]),
                        });
                    }
                }
                Op::MaxPool2 => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut runner = f64::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = x.at3(oy * 2 + dy, ox * 2 + dx, ch);
                                        if v > best {
                                            runner = best;
                                            best = v;
                                        } else if v > runner {
                                            runner = v;
                                        }
                                    }
                                }
                                // Exact ties break deterministically and move
                                // together; only near-ties poison the stencil.
                                let gap = best - runner;
                                if gap > 0.0 && gap <= 2.0 * step {
                                    return Err(Error::DegeneratePoint {
                                        node: i,
                                        op: "maxpool2".to_string(),
                                        detail: format!(
                                            "window ({},{}) channel {} max gap {:e}",
                                            oy, ox, ch, gap
                                        ),
                                    });
                                }
                            }
                        }
                    }
                }
                Op::L2Norm { floor } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (norm - floor).abs() <= step {
                        return Err(Error::DegeneratePoint {
                            node: i,
                            op: "l2-norm".to_string(),
                            detail: format!("norm {} sits at the clamp {}", norm, floor),
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        for id in &inputs {
            assert!(id.0 < self.nodes.len(), "node {} does not belong to this graph", id.0);
        }
        let idx = self.nodes.len();
        let ins: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = compute_op(&op, &ins, idx)?;
        ensure_finite(&value, idx, &op)?;
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(idx))
    }

    fn recompute_all(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input { .. }) {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let ins: Vec<&Tensor> = node.inputs.iter().map(|id| &head[id.0].value).collect();
            let value = compute_op(&node.op, &ins, i)?;
            ensure_finite(&value, i, &node.op)?;
            node.value = value;
        }
        Ok(())
    }
}

fn ensure_finite(t: &Tensor, node: usize, op: &Op) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteValue { node, op: op_name(op).to_string() })
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::ShapeMismatch { node, op: op_name(op).to_string(), detail }
}

fn compute_op(op: &Op, ins: &[&Tensor], node: usize) -> Result<Tensor> {
    match op {
        Op::Input { .. } => unreachable!("leaves are never recomputed"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(
                    node,
                    op,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = match op {
                Op::Add => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                Op::Sub => a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
                _ => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
            };
            Ok(Tensor::new_unchecked(a.shape().to_vec(), data))
        }
        Op::MatMul => matmul_forward(ins[0], ins[1], node, op),
        Op::Conv2d { padding, has_bias } => {
            let bias = if *has_bias { Some(ins[2]) } else { None };
            conv2d_forward(ins[0], ins[1], bias, *padding, node, op)
        }
        Op::Relu => {
            let data = ins[0].data().iter().map(|v| v.max(0.0)).collect();
            Ok(Tensor::new_unchecked(ins[0].shape().to_vec(), data))
        }
        Op::MaxPool2 => maxpool2_forward(ins[0], node, op),
        Op::GlobalAvgPool => {
            let x = ins[0];
            if x.rank() != 3 {
                return Err(shape_err(node, op, format!("need rank-3, got {:?}", x.shape())));
            }
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = vec![0.0; c];
            for y in 0..h {
                for xx in 0..w {
                    let base = (y * w + xx) * c;
                    for ch in 0..c {
                        out[ch] += x.data()[base + ch];
                    }
                }
            }
            let denom = (h * w) as f64;
            for v in &mut out {
                *v /= denom;
            }
            Ok(Tensor::new_unchecked(vec![c], out))
        }
        Op::Dot => {
            let (a, b) = (ins[0], ins[1]);
            if a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel() {
                return Err(shape_err(
                    node,
                    op,
                    format!("need equal-length vectors, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            }
            let s = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            Ok(Tensor::new_unchecked(vec![], vec![s]))
        }
        Op::L2Norm { floor } => {
            let x = ins[0];
            if x.rank() != 1 {
                return Err(shape_err(node, op, format!("need a vector, got {:?}", x.shape())));
            }
            let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(Tensor::new_unchecked(vec![], vec![norm.max(*floor)]))
        }
        Op::ScalarDiv => {
            let (a, s) = (ins[0], ins[1]);
            if s.numel() != 1 {
                return Err(shape_err(
                    node,
                    op,
                    format!("divisor must be scalar, got {:?}", s.shape()),
                ));
            }
            let sv = s.data()[0];
            let data = a.data().iter().map(|v| v / sv).collect();
            Ok(Tensor::new_unchecked(a.shape().to_vec(), data))
        }
        Op::LogSoftmax => {
            let x = ins[0];
            if x.rank() != 1 || x.numel() == 0 {
                return Err(shape_err(
                    node,
                    op,
                    format!("need a nonempty vector, got {:?}", x.shape()),
                ));
            }
            let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = x.data().iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum_exp.ln();
            let data = x.data().iter().map(|v| v - lse).collect();
            Ok(Tensor::new_unchecked(x.shape().to_vec(), data))
        }
        Op::Gather { index } => {
            let x = ins[0];
            if x.rank() != 1 {
                return Err(shape_err(node, op, format!("need a vector, got {:?}", x.shape())));
            }
            if *index >= x.numel() {
                return Err(shape_err(
                    node,
                    op,
                    format!("index {} out of range for length {}", index, x.numel()),
                ));
            }
            Ok(Tensor::new_unchecked(vec![], vec![x.data()[*index]]))
        }
        Op::Sum => {
            let s = ins[0].data().iter().sum();
            Ok(Tensor::new_unchecked(vec![], vec![s]))
        }
        Op::Scale { factor } => {
            if !factor.is_finite() {
                return Err(shape_err(node, op, format!("non-finite factor {}", factor)));
            }
            let data = ins[0].data().iter().map(|v| v * factor).collect();
            Ok(Tensor::new_unchecked(ins[0].shape().to_vec(), data))
        }
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor, node: usize, op: &Op) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(shape_err(node, op, format!("inner dims {} vs {}", k, k2)));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    let brow = &b.data()[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            Ok(Tensor::new_unchecked(vec![m, n], out))
        }
        (1, 2) => {
            let k = a.shape()[0];
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(shape_err(node, op, format!("inner dims {} vs {}", k, k2)));
            }
            let mut out = vec![0.0; n];
            for p in 0..k {
                let av = a.data()[p];
                let brow = &b.data()[p * n..(p + 1) * n];
                for j in 0..n {
                    out[j] += av * brow[j];
                }
            }
            Ok(Tensor::new_unchecked(vec![n], out))
        }
        _ => Err(shape_err(
            node,
            op,
            format!("unsupported ranks {:?} x {:?}", a.shape(), b.shape()),
        )),
    }
}

fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    padding: Padding,
    node: usize,
    op: &Op,
) -> Result<Tensor> {
    if x.rank() != 3 || k.rank() != 4 {
        return Err(shape_err(
            node,
            op,
            format!("need image [h,w,c] and kernel [kh,kw,cin,cout], got {:?} and {:?}", x.shape(), k.shape()),
        ));
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kcin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kcin != cin {
        return Err(shape_err(node, op, format!("kernel expects {} channels, image has {}", kcin, cin)));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err(node, op, format!("bias shape {:?}, need [{}]", b.shape(), cout)));
        }
    }
    let (py, px, oh, ow) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(shape_err(node, op, format!("same padding needs odd kernel, got {}x{}", kh, kw)));
            }
            ((kh - 1) / 2, (kw - 1) / 2, h, w)
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(shape_err(node, op, format!("kernel {}x{} larger than image {}x{}", kh, kw, h, w)));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b.data());
            }
            for ky in 0..kh {
                let iy = (oy + ky).wrapping_sub(py);
                if iy >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox + kx).wrapping_sub(px);
                    if ix >= w {
                        continue;
                    }
                    let xbase = (iy * w + ix) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ic in 0..cin {
                        let xv = xd[xbase + ic];
                        let krow = &kd[kbase + ic * cout..kbase + (ic + 1) * cout];
                        for oc in 0..cout {
                            acc[oc] += xv * krow[oc];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![oh, ow, cout], out))
}

fn maxpool2_forward(x: &Tensor, node: usize, op: &Op) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(shape_err(node, op, format!("need rank-3, got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(node, op, format!("spatial dims must be even, got {}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                // Scan order makes ties resolve to the smallest flat index.
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x.at3(oy * 2 + dy, ox * 2 + dx, ch);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(oy * ow + ox) * c + ch] = best;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![oh, ow, c], out))
}

/// Accumulates the vector-Jacobian product of one node into its inputs'
/// gradients. `grads_head` covers all nodes with index below the current one.
fn propagate(node: &Node, nodes: &[Node], g: &Tensor, grads_head: &mut [Tensor]) {
    let in_id = |i: usize| node.inputs[i].0;
    match &node.op {
        Op::Input { .. } => {}
        Op::Add => {
            for (d, gv) in grads_head[in_id(0)].data_mut().iter_mut().zip(g.data()) {
                *d += gv;
            }
            for (d, gv) in grads_head[in_id(1)].data_mut().iter_mut().zip(g.data()) {
                *d += gv;
            }
        }
        Op::Sub => {
            for (d, gv) in grads_head[in_id(0)].data_mut().iter_mut().zip(g.data()) {
                *d += gv;
            }
            for (d, gv) in grads_head[in_id(1)].data_mut().iter_mut().zip(g.data()) {
                *d -= gv;
            }
        }
        Op::Mul => {
            let (ia, ib) = (in_id(0), in_id(1));
            let a = nodes[ia].value.data().to_vec();
            let b = nodes[ib].value.data().to_vec();
            for ((d, gv), bv) in grads_head[ia].data_mut().iter_mut().zip(g.data()).zip(&b) {
                *d += gv * bv;
            }
            for ((d, gv), av) in grads_head[ib].data_mut().iter_mut().zip(g.data()).zip(&a) {
                *d += gv * av;
            }
        }
        Op::MatMul => {
            let (ia, ib) = (in_id(0), in_id(1));
            let a = &nodes[ia].value;
            let b = &nodes[ib].value;
            match (a.rank(), b.rank()) {
                (2, 2) => {
                    let (m, k) = (a.shape()[0], a.shape()[1]);
                    let n = b.shape()[1];
                    {
                        let da = grads_head[ia].data_mut();
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g.data()[i * n + j] * b.data()[p * n + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    }
                    {
                        let db = grads_head[ib].data_mut();
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += a.data()[i * k + p] * g.data()[i * n + j];
                                }
                                db[p * n + j] += s;
                            }
                        }
                    }
                }
                (1, 2) => {
                    let k = a.shape()[0];
                    let n = b.shape()[1];
                    {
                        let da = grads_head[ia].data_mut();
                        for p in 0..k {
                            let brow = &b.data()[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data()[j] * brow[j];
                            }
                            da[p] += s;
                        }
                    }
                    {
                        let db = grads_head[ib].data_mut();
                        for p in 0..k {
                            let av = a.data()[p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av * g.data()[j];
                            }
                        }
                    }
                }
                _ => unreachable!("forward validated matmul ranks"),
            }
        }
        Op::Conv2d { padding, has_bias } => {
            conv2d_backward(node, nodes, g, grads_head, *padding, *has_bias);
        }
        Op::Relu => {
            let ix = in_id(0);
            let x = nodes[ix].value.data().to_vec();
            for ((d, gv), xv) in grads_head[ix].data_mut().iter_mut().zip(g.data()).zip(&x) {
                if *xv > 0.0 {
                    *d += gv;
                }
            }
        }
        Op::MaxPool2 => {
            let ix = in_id(0);
            let x = &nodes[ix].value;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let dx = grads_head[ix].data_mut();
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_flat = 0usize;
                        for dy in 0..2 {
                            for dxp in 0..2 {
                                let (iy, ixx) = (oy * 2 + dy, ox * 2 + dxp);
                                let flat = (iy * w + ixx) * c + ch;
                                let v = x.data()[flat];
                                if v > best {
                                    best = v;
                                    best_flat = flat;
                                }
                            }
                        }
                        dx[best_flat] += g.data()[(oy * ow + ox) * c + ch];
                    }
                }
            }
        }
        Op::GlobalAvgPool => {
            let ix = in_id(0);
            let x = &nodes[ix].value;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let denom = (h * w) as f64;
            let dx = grads_head[ix].data_mut();
            for y in 0..h {
                for xx in 0..w {
                    let base = (y * w + xx) * c;
                    for ch in 0..c {
                        dx[base + ch] += g.data()[ch] / denom;
                    }
                }
            }
        }
        Op::Dot => {
            let (ia, ib) = (in_id(0), in_id(1));
            let gs = g.data()[0];
            let a = nodes[ia].value.data().to_vec();
            let b = nodes[ib].value.data().to_vec();
            for (d, bv) in grads_head[ia].data_mut().iter_mut().zip(&b) {
                *d += gs * bv;
            }
            for (d, av) in grads_head[ib].data_mut().iter_mut().zip(&a) {
                *d += gs * av;
            }
        }
        Op::L2Norm { floor } => {
            let ix = in_id(0);
            let x = nodes[ix].value.data().to_vec();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Inside the clamp the output is constant.
            if norm > *floor && norm > 0.0 {
                let gs = g.data()[0];
                for (d, xv) in grads_head[ix].data_mut().iter_mut().zip(&x) {
                    *d += gs * xv / norm;
                }
            }
        }
        Op::ScalarDiv => {
            let (ia, is) = (in_id(0), in_id(1));
            let s = nodes[is].value.data()[0];
            let a = nodes[ia].value.data().to_vec();
            for (d, gv) in grads_head[ia].data_mut().iter_mut().zip(g.data()) {
                *d += gv / s;
            }
            let mut ds = 0.0;
            for (gv, av) in g.data().iter().zip(&a) {
                ds -= gv * av / (s * s);
            }
            grads_head[is].data_mut()[0] += ds;
        }
        Op::LogSoftmax => {
            let ix = in_id(0);
            let y = &node.value;
            let total: f64 = g.data().iter().sum();
            let dx = grads_head[ix].data_mut();
            for (j, (gv, yv)) in g.data().iter().zip(y.data()).enumerate() {
                dx[j] += gv - yv.exp() * total;
            }
        }
        Op::Gather { index } => {
            grads_head[in_id(0)].data_mut()[*index] += g.data()[0];
        }
        Op::Sum => {
            let gs = g.data()[0];
            for d in grads_head[in_id(0)].data_mut() {
                *d += gs;
            }
        }
        Op::Scale { factor } => {
            for (d, gv) in grads_head[in_id(0)].data_mut().iter_mut().zip(g.data()) {
                *d += gv * factor;
            }
        }
    }
}

fn conv2d_backward(
    node: &Node,
    nodes: &[Node],
    g: &Tensor,
    grads_head: &mut [Tensor],
    padding: Padding,
    has_bias: bool,
) {
    let ix = node.inputs[0].0;
    let ik = node.inputs[1].0;
    let x = &nodes[ix].value;
    let k = &nodes[ik].value;
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (py, px, oh, ow) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
    };
    let xd = x.data().to_vec();
    let kd = k.data().to_vec();
    let gd = g.data();

    if has_bias {
        let ib = node.inputs[2].0;
        let db = grads_head[ib].data_mut();
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for oc in 0..cout {
                    db[oc] += grow[oc];
                }
            }
        }
    }
    {
        let dk = grads_head[ik].data_mut();
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..kh {
                    let iy = (oy + ky).wrapping_sub(py);
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ixx = (ox + kx).wrapping_sub(px);
                        if ixx >= w {
                            continue;
                        }
                        let xbase = (iy * w + ixx) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ic in 0..cin {
                            let xv = xd[xbase + ic];
                            let drow = &mut dk[kbase + ic * cout..kbase + (ic + 1) * cout];
                            for oc in 0..cout {
                                drow[oc] += xv * grow[oc];
                            }
                        }
                    }
                }
            }
        }
    }
    {
        let dx = grads_head[ix].data_mut();
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &gd[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..kh {
                    let iy = (oy + ky).wrapping_sub(py);
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ixx = (ox + kx).wrapping_sub(px);
                        if ixx >= w {
                            continue;
                        }
                        let xbase = (iy * w + ixx) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ic in 0..cin {
                            let krow = &kd[kbase + ic * cout..kbase + (ic + 1) * cout];
                            let mut s = 0.0;
                            for oc in 0..cout {
                                s += krow[oc] * grow[oc];
                            }
                            dx[xbase + ic] += s;
                        }
                    }
                }
            }
        }
    }
}
