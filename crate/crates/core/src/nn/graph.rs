//! Define-then-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in topological order, so the node list itself is the
//! evaluation schedule. `forward` evaluates every node added since the last
//! call, which lets auto-regressive decoding grow the graph one step at a
//! time while reusing the already-computed trunk.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::tensor::{gemm, MatRef, Tensor};
use super::NnError;

pub type NodeId = usize;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Source of named leaf values.
pub trait Bindings {
    fn get(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        BTreeMap::get(self, name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn get(&self, name: &str) -> Option<&Tensor> {
        HashMap::get(self, name)
    }
}

/// No named leaves; for graphs built purely from constants.
pub struct NoBindings;

impl Bindings for NoBindings {
    fn get(&self, _name: &str) -> Option<&Tensor> {
        None
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Named leaf. Parameters receive gradients, plain inputs do not.
    Leaf { name: String, param: bool },
    Constant,
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right operand may be a row vector broadcast over rows.
    Add(NodeId, NodeId),
    Tanh(NodeId),
    /// Row-wise softmax over logits. Output is `[rows, 2]`: column 0 holds
    /// `-log p[target]`, column 1 the entropy of the row distribution.
    SoftmaxXent { logits: NodeId, targets: Vec<usize> },
    /// Output row `i` is the sum of the table rows listed in `bags[i]`.
    Gather { table: NodeId, bags: Vec<Vec<usize>> },
    Scale(NodeId, f64),
    /// Sum of all entries, shape `[1]`.
    Sum(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    Tanh,
    SoftmaxXent,
    Gather,
    Scale,
    Sum,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Tanh(_) => OpKind::Tanh,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::Gather { .. } => OpKind::Gather,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Tanh(a) | Op::Scale(a, _) | Op::Sum(a) => vec![*a],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

struct Node<'a> {
    op: Op,
    value: Option<Cow<'a, Tensor>>,
    grad: Option<Tensor>,
    /// Softmax probabilities for `SoftmaxXent` nodes.
    probs: Option<Vec<f64>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    evaluated: usize,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), evaluated: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { param, .. } => *param,
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        for i in op.inputs() {
            assert!(i < self.nodes.len(), "node input {i} does not exist yet");
        }
        self.nodes.push(Node { op, value: None, grad: None, probs: None, needs_grad });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Leaf { name: name.to_string(), param: true })
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Leaf { name: name.to_string(), param: false })
    }

    /// Leaf with an owned value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Constant);
        self.nodes[id].value = Some(Cow::Owned(value));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxXent { logits, targets })
    }

    pub fn gather(&mut self, table: NodeId, bags: Vec<Vec<usize>>) -> NodeId {
        self.push(Op::Gather { table, bags })
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id).and_then(|n| n.value.as_deref())
    }

    /// Softmax probabilities cached by a `SoftmaxXent` node.
    pub fn probs(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id).and_then(|n| n.probs.as_deref())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id).and_then(|n| n.grad.as_ref())
    }

    /// Evaluates all nodes added since the previous call and returns the
    /// value of the last node.
    pub fn forward(&mut self, bindings: &'a dyn Bindings) -> Result<&Tensor, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::EmptyGraph);
        }
        for id in self.evaluated..self.nodes.len() {
            let (value, probs) = self.eval_node(id, bindings)?;
            if let Some(v) = value {
                self.nodes[id].value = Some(v);
            }
            self.nodes[id].probs = probs;
            // Any new node invalidates stale gradients.
            self.nodes[id].grad = None;
        }
        self.evaluated = self.nodes.len();
        Ok(self.nodes.last().and_then(|n| n.value.as_deref()).expect("evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id].value.as_deref().expect("inputs are evaluated before use")
    }

    #[allow(clippy::type_complexity)]
    fn eval_node(
        &self,
        id: NodeId,
        bindings: &'a dyn Bindings,
    ) -> Result<(Option<Cow<'a, Tensor>>, Option<Vec<f64>>), NnError> {
        let shape_err = |msg: String| NnError::Shape { node: id, kind: self.nodes[id].op.kind(), msg };
        let mut probs_out = None;
        let out = match &self.nodes[id].op {
            Op::Leaf { name, .. } => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| NnError::UnboundInput { node: id, name: name.clone() })?;
                Cow::Borrowed(t)
            }
            Op::Constant => return Ok((None, None)),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(shape_err(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, 0.0);
                Cow::Owned(Tensor::from_parts(vec![m, n], out))
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = a.clone();
                if a.shape() == b.shape() {
                    out.add_assign(b);
                } else if b.len() == a.cols() && b.rows() == 1 {
                    let c = a.cols();
                    for row in out.data_mut().chunks_mut(c) {
                        for (x, y) in row.iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                } else {
                    return Err(shape_err(format!("add {:?} + {:?}", a.shape(), b.shape())));
                }
                Cow::Owned(out)
            }
            Op::Tanh(a) => {
                let a = self.val(*a);
                let data = a.data().iter().map(|x| x.tanh()).collect();
                Cow::Owned(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::SoftmaxXent { logits, targets } => {
                let z = self.val(*logits);
                let (rows, cols) = (z.rows(), z.cols());
                if targets.len() != rows {
                    return Err(shape_err(format!("{} targets for {rows} rows", targets.len())));
                }
                if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
                    return Err(shape_err(format!("target {t} out of {cols} classes")));
                }
                let mut probs = vec![0.0; rows * cols];
                let mut out = Vec::with_capacity(rows * 2);
                for (r, &t) in targets.iter().enumerate() {
                    let p = &mut probs[r * cols..(r + 1) * cols];
                    let (log_p_target, entropy) = softmax_row(z.row(r), t, p);
                    out.push(-log_p_target);
                    out.push(entropy);
                }
                probs_out = Some(probs);
                Cow::Owned(Tensor::from_parts(vec![rows, 2], out))
            }
            Op::Gather { table, bags } => {
                let t = self.val(*table);
                let (rows, cols) = (t.rows(), t.cols());
                if bags.is_empty() {
                    return Err(shape_err("gather with no output rows".into()));
                }
                let mut out = vec![0.0; bags.len() * cols];
                for (o, bag) in out.chunks_mut(cols).zip(bags) {
                    for &idx in bag {
                        if idx >= rows {
                            return Err(shape_err(format!("index {idx} out of {rows} rows")));
                        }
                        for (x, y) in o.iter_mut().zip(t.row(idx)) {
                            *x += y;
                        }
                    }
                }
                Cow::Owned(Tensor::from_parts(vec![bags.len(), cols], out))
            }
            Op::Scale(a, s) => {
                let mut out = self.val(*a).clone();
                out.scale_in_place(*s);
                Cow::Owned(out)
            }
            Op::Sum(a) => {
                let s = self.val(*a).data().iter().sum();
                Cow::Owned(Tensor::scalar(s))
            }
        };
        Ok((Some(out), probs_out))
    }

    /// Backpropagates from the last node, which must hold a single value.
    pub fn backward(&mut self) -> Result<Gradients, NnError> {
        let root = self.nodes.len().checked_sub(1).ok_or(NnError::EmptyGraph)?;
        let v = self.value(root).ok_or(NnError::NotEvaluated)?;
        if v.len() != 1 {
            return Err(NnError::Shape {
                node: root,
                kind: self.nodes[root].op.kind(),
                msg: format!("backward root must be scalar, got {:?}", v.shape()),
            });
        }
        let seed = Tensor::filled(v.shape(), 1.0);
        self.backward_with(vec![(root, seed)])
    }

    /// Vector-Jacobian product: backpropagates the given upstream gradients
    /// (one per seeded node) and returns the gradient of every parameter leaf.
    pub fn backward_with(&mut self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients, NnError> {
        if self.evaluated != self.nodes.len() || self.nodes.is_empty() {
            return Err(NnError::NotEvaluated);
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut last = 0;
        for (id, g) in seeds {
            let Some(node) = self.nodes.get_mut(id) else {
                return Err(NnError::UnknownNode(id));
            };
            let shape = node.value.as_deref().map(|v| v.shape().to_vec()).unwrap_or_default();
            if shape != g.shape() {
                return Err(NnError::Shape {
                    node: id,
                    kind: node.op.kind(),
                    msg: format!("seed gradient {:?} for value {:?}", g.shape(), shape),
                });
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
            last = last.max(id);
        }
        for id in (0..=last).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            self.propagate(id, &g);
            self.nodes[id].grad = Some(g);
        }
        let mut grads = Gradients::new();
        for n in &self.nodes {
            if let Op::Leaf { name, param: true } = &n.op {
                let g = n
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(n.value.as_deref().expect("evaluated").shape()));
                match grads.get_mut(name) {
                    // The same parameter bound to several leaves accumulates.
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(acc) => acc.add_assign(&g),
            None => self.nodes[id].grad = Some(g),
        }
    }

    fn propagate(&mut self, id: NodeId, g: &Tensor) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = self.nodes[a].needs_grad.then(|| {
                    // dA = G · Bᵀ
                    let mut out = vec![0.0; m * k];
                    gemm(MatRef::new(g.data(), m, n), MatRef::new(bv.data(), k, n).t(), &mut out, 0.0);
                    Tensor::from_parts(av.shape().to_vec(), out)
                });
                let gb = self.nodes[b].needs_grad.then(|| {
                    // dB = Aᵀ · G
                    let mut out = vec![0.0; k * n];
                    gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g.data(), m, n), &mut out, 0.0);
                    Tensor::from_parts(bv.shape().to_vec(), out)
                });
                if let Some(ga) = ga {
                    self.accumulate(a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                let bshape = self.val(b).shape().to_vec();
                if self.nodes[b].needs_grad {
                    let gb = if bshape == g.shape() {
                        g.clone()
                    } else {
                        let c = g.cols();
                        let mut acc = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (x, y) in acc.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                        Tensor::from_parts(bshape, acc)
                    };
                    self.accumulate(b, gb);
                }
                self.accumulate(a, g.clone());
            }
            Op::Tanh(a) => {
                let y = self.nodes[id].value.as_deref().expect("evaluated");
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                let ga = Tensor::from_parts(y.shape().to_vec(), data);
                self.accumulate(a, ga);
            }
            Op::SoftmaxXent { logits, targets } => {
                let probs = self.nodes[id].probs.as_ref().expect("evaluated");
                let cols = self.val(logits).cols();
                let out = self.nodes[id].value.as_deref().expect("evaluated");
                let mut dz = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let (g_nll, g_ent) = (g.data()[2 * r], g.data()[2 * r + 1]);
                    let entropy = out.data()[2 * r + 1];
                    let p = &probs[r * cols..(r + 1) * cols];
                    let d = &mut dz[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let mut v = g_nll * p[j];
                        if g_ent != 0.0 && p[j] > 0.0 {
                            // dH/dz_j = -p_j (log p_j + H)
                            v -= g_ent * p[j] * (p[j].ln() + entropy);
                        }
                        d[j] = v;
                    }
                    d[t] -= g_nll;
                }
                let shape = self.val(logits).shape().to_vec();
                self.accumulate(logits, Tensor::from_parts(shape, dz));
            }
            Op::Gather { table, bags } => {
                let shape = self.val(table).shape().to_vec();
                let mut gt = Tensor::zeros(&shape);
                let cols = gt.cols();
                for (r, bag) in bags.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for &idx in bag {
                        for (x, y) in gt.row_mut(idx).iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                self.accumulate(table, gt);
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale_in_place(s);
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                self.accumulate(a, Tensor::filled(&shape, g.item()));
            }
        }
    }
}

/// Fills `probs` with the softmax of `logits` and returns
/// `(log p[target], entropy)`.
pub fn softmax_row(logits: &[f64], target: usize, probs: &mut [f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        total += *p;
    }
    let log_total = total.ln();
    let mut entropy = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p /= total;
        if *p > 0.0 {
            entropy -= *p * (z - max - log_total);
        }
    }
    (logits[target] - max - log_total, entropy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut p = [0.0; 2];
        let (lp, h) = softmax_row(&[0.0, 0.0], 0, &mut p);
        assert_eq!(p, [0.5, 0.5]);
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        assert!((h - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        g.tanh(x);
        assert_eq!(g.forward(&NoBindings).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_four_class_cross_entropy() {
        let mut g = Graph::new();
        let z = g.input("z");
        let ce = g.softmax_xent(z, vec![2]);
        let b: BTreeMap<String, Tensor> = [("z".to_string(), t(&[1, 4], &[0.3; 4]))].into();
        g.forward(&b).unwrap();
        let nll = g.value(ce).unwrap().data()[0];
        assert!((nll - 4f64.ln()).abs() < 1e-12, "{nll}");
        assert!((nll - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        for k in 0..4 {
            let mut g = Graph::new();
            let z = g.param("z");
            let ce = g.softmax_xent(z, vec![k]);
            let b: BTreeMap<String, Tensor> = [("z".to_string(), Tensor::zeros(&[1, 4]))].into();
            g.forward(&b).unwrap();
            let grads = g.backward_with(vec![(ce, t(&[1, 2], &[1.0, 0.0]))]).unwrap();
            let mut want = [0.25; 4];
            want[k] -= 1.0;
            for (a, w) in grads["z"].data().iter().zip(want) {
                assert!((a - w).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sum_of_scaled_has_constant_gradient() {
        let mut g = Graph::new();
        let x = g.param("x");
        let s = g.scale(x, 3.0);
        g.sum(s);
        let b: BTreeMap<String, Tensor> = [("x".to_string(), t(&[2, 3], &[1., -2., 0.5, 4., 0., 9.]))].into();
        assert_eq!(g.forward(&b).unwrap().item(), 3.0 * 12.5);
        let grads = g.backward().unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let m = g.matmul(a, b);
        match g.forward(&NoBindings) {
            Err(NnError::Shape { node, kind, .. }) => {
                assert_eq!(node, m);
                assert_eq!(kind, OpKind::MatMul);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn unbound_input_rejected() {
        let mut g = Graph::new();
        g.input("missing");
        assert!(matches!(g.forward(&NoBindings), Err(NnError::UnboundInput { .. })));
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut g = Graph::new();
        let x = g.param("x");
        g.sum(x);
        assert!(matches!(g.backward(), Err(NnError::NotEvaluated)));
    }

    #[test]
    fn non_parameter_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w");
        let y = g.matmul(x, w);
        g.sum(y);
        let b: BTreeMap<String, Tensor> = [
            ("x".to_string(), t(&[1, 2], &[1.0, 2.0])),
            ("w".to_string(), t(&[2, 1], &[3.0, 4.0])),
        ]
        .into();
        g.forward(&b).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["w"]);
        assert_eq!(grads["w"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn incremental_forward_reuses_prefix() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let h = g.tanh(x);
        g.forward(&NoBindings).unwrap();
        let s = g.sum(h);
        let v = g.forward(&NoBindings).unwrap().item();
        assert_eq!(v, 0.0);
        assert_eq!(s, 2);
    }
}
