use super::{Primitive, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: NodeId,
}

impl Var {
    pub fn id(self) -> NodeId {
        self.id
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Leaves created with
/// [`Tape::var`] are differentiable; [`Tape::constant`] leaves and anything
/// computed only from constants carry no gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], keyed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<Primitive>, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> Var {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var { id }
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, false)
    }

    /// Copies the current value of `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id.0].requires_grad
    }

    /// Evaluates `kind` on `inputs` and records the node.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.id.0].value).collect();
        let out = kind.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id.0].requires_grad);
        Ok(self.push(Some(kind), inputs.iter().map(|v| v.id).collect(), out, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Ln, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Neg, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Shift(c), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.apply(Primitive::GatherRows(index.to_vec()), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceRows { start, end }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatRows, parts)
    }

    /// Gradient of the scalar `root` with respect to every differentiable
    /// node it depends on. Fan-out contributions are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let grads = self.sweep(root, |node| node.requires_grad)?;
        Ok(Gradients { grads })
    }

    /// Gradient of `root` with respect to `wrt` only. Nodes that do not
    /// depend on any of `wrt` are skipped, so parameter gradients are never
    /// formed when differentiating against an input perturbation.
    pub fn backward_wrt(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut relevant = vec![false; self.nodes.len()];
        for v in wrt {
            relevant[v.id.0] = true;
        }
        let start = wrt.iter().map(|v| v.id.0).min().unwrap_or(self.nodes.len());
        for i in start..self.nodes.len() {
            if !relevant[i] && self.nodes[i].inputs.iter().any(|p| relevant[p.0]) {
                relevant[i] = self.nodes[i].requires_grad;
            }
        }
        let mut grads = self.sweep_masked(root, &relevant)?;
        Ok(wrt
            .iter()
            .map(|v| {
                grads[v.id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.id.0].value.shape()))
            })
            .collect())
    }

    fn sweep(&self, root: Var, include: impl Fn(&Node) -> bool) -> Result<Vec<Option<Tensor>>> {
        let mask: Vec<bool> = self.nodes.iter().map(include).collect();
        self.sweep_masked(root, &mask)
    }

    fn sweep_masked(&self, root: Var, mask: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let root_value = &self.nodes[root.id.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !mask[root.id.0] {
            return Ok(grads);
        }
        grads[root.id.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.id.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !mask[i] {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|p| mask[p.0]).collect();
            if !needs.iter().any(|&b| b) {
                grads[i] = Some(grad);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|p| &self.nodes[p.0].value).collect();
            let parts = op.backward(&inputs, &node.value, &grad, &needs);
            for (p, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !mask[p.0] {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
            grads[i] = Some(grad);
        }
        Ok(grads)
    }
}
