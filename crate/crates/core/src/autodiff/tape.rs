use super::backend::Backend;
use super::dual::DualTensor;
use super::kernels::{self, OpKind, Saved};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf,
    Constant,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    inputs: Vec<Var>,
    value: Tensor,
    saved: Saved,
    /// Whether any tracked leaf reaches this node.
    tracked: bool,
}

/// Reverse-mode recording of a computation.
///
/// Nodes are appended in evaluation order, which is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub type ComputationRecord = Tape;

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

    /// Registers a gradient-tracked input.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.set_grad_tracked(true);
        self.push(NodeKind::Leaf, Vec::new(), t, Saved::None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<Var>, value: Tensor, saved: Saved, tracked: bool) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            saved,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.nodes.get(output.0).ok_or(Error::NotALeaf)?;
        if out.value.len() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        for w in wrt {
            match self.nodes.get(w.0) {
                Some(Node {
                    kind: NodeKind::Leaf, ..
                }) => {}
                _ => return Err(Error::NotALeaf),
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let NodeKind::Op(kind) = &node.kind else {
                grads[idx] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].tracked).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = kernels::backward(kind, &inputs, &node.saved, &g, &needs)?;
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => acc.add(&ig)?,
                    None => ig,
                });
            }
        }
        wrt.iter()
            .map(|w| {
                let g = grads
                    .get(w.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[w.0].value.shape()));
                g.ensure_finite("grad")
            })
            .collect()
    }

    fn check_substitutions(&self, subs: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in subs {
            let Some(node) = self.nodes.get(v.0) else {
                return Err(Error::NotALeaf);
            };
            if matches!(node.kind, NodeKind::Op(_)) {
                return Err(Error::NotALeaf);
            }
            if node.value.shape() != t.shape() {
                return shape_err(
                    "replay",
                    format!("{:?} vs recorded {:?}", t.shape(), node.value.shape()),
                );
            }
        }
        Ok(())
    }

    /// Re-evaluates every recorded op with some inputs replaced and returns
    /// the new value of `output`.
    pub fn replay(&self, subs: &[(Var, Tensor)], output: Var) -> Result<Tensor> {
        self.check_substitutions(subs)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(output.0 + 1);
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            let v = match &node.kind {
                NodeKind::Op(kind) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    kernels::forward(kind, &inputs)?.0
                }
                _ => subs
                    .iter()
                    .find(|(v, _)| v.0 == idx)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
            };
            values.push(v);
        }
        Ok(values.swap_remove(output.0))
    }

    /// Forward-mode pass over the record: pushes `tangents` (keyed by input
    /// var) through every op and returns the output as a dual.
    pub fn jvp(&self, tangents: &[(Var, Tensor)], output: Var) -> Result<DualTensor> {
        self.check_substitutions(tangents)?;
        let mut tan: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            let t = match &node.kind {
                NodeKind::Op(kind) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let ts: Vec<Option<&Tensor>> = node.inputs.iter().map(|v| tan[v.0].as_ref()).collect();
                    kernels::jvp(kind, &inputs, &ts, &node.saved)?
                }
                _ => tangents.iter().find(|(v, _)| v.0 == idx).map(|(_, t)| t.clone()),
            };
            tan.push(t);
        }
        let primal = self.nodes[output.0].value.clone();
        DualTensor::with_optional_tangent(primal, tan.swap_remove(output.0))
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(NodeKind::Constant, Vec::new(), t, Saved::None, false)
    }

    fn apply(&mut self, kind: OpKind, inputs: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = kernels::forward(&kind, &tensors)?;
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let inputs = inputs.iter().map(|v| **v).collect();
        Ok(self.push(NodeKind::Op(kind), inputs, value, saved, tracked))
    }

    fn primal<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}
