use crate::error::{Error, Result};

use super::params::ParamId;
use super::Tensor;

/// Backward rule of a recorded primitive: given the gradient of the node's
/// output and a mask telling which parents need a gradient, return one
/// optional gradient per parent (same element count as that parent).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Op,
    Constant,
    Input,
    Param(ParamId),
}

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    origin: Origin,
}

/// Define-by-run record of one forward pass. A tape is built fresh for every
/// forward pass and confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: every backward rule recorded under `op` will return scaled
    /// gradients. Used as the negative control of the gradient suite.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, origin: Origin, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            origin,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, Origin::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, Origin::Input, true)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor, trainable: bool) -> Var {
        self.leaf(value, Origin::Param(id), trainable)
    }

    /// Copies the value of `v` into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a primitive. The output must be finite; the backward rule is
    /// dropped when no parent requires a gradient.
    pub(crate) fn push<F>(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
            origin: Origin::Op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are retained for input
    /// and parameter leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Tape(format!("loss handle {} not on tape", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| {
                    assert!(p < i, "tape is not topologically ordered at node {i}");
                    self.nodes[p].requires_grad
                })
                .collect();
            let mut parent_grads = backward(&g, &needs);
            if self.fault.as_deref() == Some(node.op) {
                for pg in parent_grads.iter_mut().flatten() {
                    pg.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p].value.numel(), "{}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.origin == Origin::Op || node.origin == Origin::Constant {
                grads[i] = None;
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.origin {
                Origin::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to an input or parameter leaf, `None` when the
    /// loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zeros when unreachable.
    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    }

    /// Adds every parameter gradient into `acc`, indexed by parameter id.
    pub fn accumulate_params(&self, acc: &mut [Vec<f64>], scale: f64) {
        for &(id, node) in &self.params {
            if let (Some(g), Some(slot)) = (self.grads[node].as_ref(), acc.get_mut(id.0)) {
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
    }
}
